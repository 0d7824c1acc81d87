//! Receiver-based Orchestra-style autonomous schedules.
//!
//! Each node derives its cells from a stable hash of its id. In the unicast
//! slotframe a node listens on its own hashed cell and transmits toward a
//! neighbour on that neighbour's hashed cell, so all children of a parent
//! contend on the parent's cell. EB and broadcast slotframes run alongside,
//! with priority EB > broadcast > unicast. Nothing here adapts to traffic.
//!
//! The hash is a splitmix64 finaliser over the node id:
//! offset = h mod frame_len, channel offset = h mod (|F| - 1) + 1.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::channels::{ChannelOffset, F_BCAST};
use crate::slotframe::{Cell, Dir, SlotType, Slotframe};
use crate::topology::{Dodag, NodeId};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct OrchestraConfig {
    pub unicast_slotframe_len: usize,
    pub broadcast_slotframe_len: usize,
    pub eb_slotframe_len: usize,
}

impl Default for OrchestraConfig {
    fn default() -> Self {
        Self {
            unicast_slotframe_len: 8,
            broadcast_slotframe_len: 31,
            eb_slotframe_len: 397,
        }
    }
}

impl OrchestraConfig {
    pub fn with_unicast(len: usize) -> Self {
        Self {
            unicast_slotframe_len: len,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        let l = [
            self.unicast_slotframe_len,
            self.broadcast_slotframe_len,
            self.eb_slotframe_len,
        ];
        if l.contains(&0) {
            return Err("Orchestra slotframe lengths must be positive".into());
        }
        Ok(())
    }

    /// Whether the three lengths are pairwise coprime.
    pub fn coprime(&self) -> bool {
        let gcd = |mut a: usize, mut b: usize| {
            while b != 0 {
                (a, b) = (b, a % b);
            }
            a
        };
        let (u, b, e) = (
            self.unicast_slotframe_len,
            self.broadcast_slotframe_len,
            self.eb_slotframe_len,
        );
        gcd(u, b) == 1 && gcd(u, e) == 1 && gcd(b, e) == 1
    }
}

pub fn node_hash(node: NodeId) -> u64 {
    let mut z = (node.0 as u64).wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Hashed (slot offset, channel offset) of `node` in a frame of `frame_len`.
pub fn orchestra_slot_of(
    node: NodeId,
    frame_len: usize,
    num_channels: u8,
) -> (usize, ChannelOffset) {
    let h = node_hash(node);
    let offset = (h % frame_len as u64) as usize;
    let channel = (h % (num_channels as u64 - 1)) as u8 + 1;
    (offset, ChannelOffset(channel))
}

/// What a node's Orchestra schedule asks for in one slot.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OrchestraAction {
    EbTx,
    EbRx,
    Broadcast,
    /// Unicast slot: `rx` when it is the node's own cell, `tx` when it is
    /// the parent's cell. Both may be set.
    Unicast {
        rx: Option<ChannelOffset>,
        tx: Option<ChannelOffset>,
    },
    Sleep,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct OrchestraSchedule {
    pub owner: NodeId,
    pub parent: Option<NodeId>,
    pub cfg: OrchestraConfig,
    pub rx: (usize, ChannelOffset),
    pub tx_parent: Option<(usize, ChannelOffset)>,
    pub tx_children: Vec<(NodeId, usize, ChannelOffset)>,
    pub eb_tx: usize,
    pub eb_rx: Option<usize>,
}

impl OrchestraSchedule {
    pub fn action_at(&self, asn: u64) -> OrchestraAction {
        let e = (asn % self.cfg.eb_slotframe_len as u64) as usize;
        if e == self.eb_tx {
            return OrchestraAction::EbTx;
        }
        if Some(e) == self.eb_rx {
            return OrchestraAction::EbRx;
        }
        if asn.is_multiple_of(self.cfg.broadcast_slotframe_len as u64) {
            return OrchestraAction::Broadcast;
        }
        let u = (asn % self.cfg.unicast_slotframe_len as u64) as usize;
        let rx = (u == self.rx.0).then_some(self.rx.1);
        let tx = self.tx_parent.filter(|(o, _)| *o == u).map(|(_, c)| c);
        if rx.is_none() && tx.is_none() {
            OrchestraAction::Sleep
        } else {
            OrchestraAction::Unicast { rx, tx }
        }
    }

    /// The unicast slotframe in the common dump format. Where the node's Rx
    /// cell and its Tx cell toward the parent coincide, the Tx cell is shown.
    pub fn unicast_frame(&self) -> Slotframe {
        let mut sf = Slotframe::empty(self.owner, self.cfg.unicast_slotframe_len);
        if let (Some(p), Some((o, c))) = (self.parent, self.tx_parent) {
            let _ = sf.place(
                o,
                Cell::new(
                    SlotType::UnicastData {
                        peer: p,
                        dir: Dir::Tx,
                    },
                    c,
                ),
            );
        }
        let _ = sf.place(
            self.rx.0,
            Cell::new(
                SlotType::UnicastData {
                    peer: self.owner,
                    dir: Dir::Rx,
                },
                self.rx.1,
            ),
        );
        for &(c, o, ch) in &self.tx_children {
            let _ = sf.place(
                o,
                Cell::new(
                    SlotType::UnicastData {
                        peer: c,
                        dir: Dir::Tx,
                    },
                    ch,
                ),
            );
        }
        sf
    }

    pub fn broadcast_frame(&self) -> Slotframe {
        let mut sf = Slotframe::empty(self.owner, self.cfg.broadcast_slotframe_len);
        let _ = sf.place(0, Cell::new(SlotType::Broadcast, F_BCAST));
        sf
    }
}

pub fn build_orchestra_frames(
    d: &Dodag,
    cfg: OrchestraConfig,
    num_channels: u8,
) -> BTreeMap<NodeId, OrchestraSchedule> {
    let mut out = BTreeMap::new();
    for n in d.members() {
        let parent = d.parent(n);
        let rx = orchestra_slot_of(n, cfg.unicast_slotframe_len, num_channels);
        let tx_parent =
            parent.map(|p| orchestra_slot_of(p, cfg.unicast_slotframe_len, num_channels));
        let tx_children = d
            .children(n)
            .iter()
            .map(|&c| {
                let (o, ch) = orchestra_slot_of(c, cfg.unicast_slotframe_len, num_channels);
                (c, o, ch)
            })
            .collect();
        let eb_tx = (node_hash(n) % cfg.eb_slotframe_len as u64) as usize;
        let eb_rx = parent.map(|p| (node_hash(p) % cfg.eb_slotframe_len as u64) as usize);
        out.insert(
            n,
            OrchestraSchedule {
                owner: n,
                parent,
                cfg,
                rx,
                tx_parent,
                tx_children,
                eb_tx,
                eb_rx,
            },
        );
    }
    out
}
