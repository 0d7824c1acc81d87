//! 6P ADD/DELETE handling and the parent-side Unicast-Data grant policy.
//!
//! A parent grants Rx cells so that, in every non-root frame,
//! (a) data Tx cells outnumber data Rx cells,
//! (b) walking the frame cyclically, a Tx cell sits between any two Rx cells,
//! (c) concurrent requests are served round-robin in child-id order, and a
//!     child is not handed an Rx cell directly after one of its own while
//!     another child is still being served.
//! Offsets are chosen lowest-first among those satisfying the rules.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;

use thiserror::Error;

use crate::channels::ChannelOffset;
use crate::game::{optimal_l_tx, GameParams, NodeGameView};
use crate::slotframe::{Cell, Dir, SlotType, Slotframe};
use crate::topology::NodeId;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CellAllocError {
    #[error("parent {parent} has no grantable cell for {child}")]
    NoCapacity { parent: NodeId, child: NodeId },
    #[error("stale 6P sequence number {seq} from {child} (last seen {last})")]
    StaleSeq { child: NodeId, seq: u32, last: u32 },
    #[error("6P request must name at least one cell")]
    ZeroCount,
}

/// Minimum Tx cells still needed. Negative means surplus.
pub fn compute_l_tx_min(l_g: u32, l_tx_children: u32, l_tx_free: u32) -> i64 {
    l_g as i64 + l_tx_children as i64 - l_tx_free as i64
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RequestDecision {
    None,
    Exact(u32),
    /// Pick a count in `[lo, hi]` with the game solver.
    Band {
        lo: u32,
        hi: u32,
    },
}

pub fn should_request(l_tx_min: i64, l_rx_parent: u32) -> RequestDecision {
    if l_tx_min <= 0 || l_rx_parent == 0 {
        RequestDecision::None
    } else if l_rx_parent as i64 <= l_tx_min {
        RequestDecision::Exact(l_rx_parent)
    } else {
        RequestDecision::Band {
            lo: l_tx_min as u32,
            hi: l_rx_parent,
        }
    }
}

/// Full request decision: trigger rule, then the game for the band case.
pub fn request_size(
    l_tx_min: i64,
    l_rx_parent: u32,
    rank_bar: f64,
    etx: f64,
    q_ewma: f64,
    params: &GameParams,
) -> Option<u32> {
    match should_request(l_tx_min, l_rx_parent) {
        RequestDecision::None => None,
        RequestDecision::Exact(n) => Some(n),
        RequestDecision::Band { lo, hi } => Some(optimal_l_tx(
            &NodeGameView {
                rank_bar,
                etx,
                q_ewma,
                l_tx_min: lo,
                l_rx_parent: hi,
            },
            params,
        )),
    }
}

/// Cells to release for a surplus, keeping `hysteresis` spare.
pub fn delete_count(l_tx_min: i64, hysteresis: u32) -> u32 {
    (-l_tx_min - hysteresis as i64).max(0) as u32
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct GrantResult {
    pub requested: u32,
    pub offsets: Vec<usize>,
}

impl GrantResult {
    pub fn granted(&self) -> u32 {
        self.offsets.len() as u32
    }
}

fn data_dirs(sf: &Slotframe) -> Vec<(usize, Dir)> {
    sf.cells()
        .iter()
        .enumerate()
        .filter_map(|(i, c)| match c.kind {
            SlotType::UnicastData { dir, .. } => Some((i, dir)),
            _ => None,
        })
        .collect()
}

/// Cyclic neighbours of offset `x` among the data cells (excluding `x`).
fn data_neighbours(sf: &Slotframe, x: usize) -> Option<(Dir, Dir)> {
    let data: Vec<(usize, Dir)> = data_dirs(sf).into_iter().filter(|&(o, _)| o != x).collect();
    if data.is_empty() {
        return None;
    }
    let after = data.iter().position(|&(o, _)| o > x).unwrap_or(0);
    let before = (after + data.len() - 1) % data.len();
    Some((data[before].1, data[after].1))
}

/// Whether an Rx cell can go at `x` without breaking rules (a) and (b).
fn rx_fits(sf: &Slotframe, x: usize, is_root: bool) -> bool {
    if !sf.is_free(x) {
        return false;
    }
    if is_root {
        return true;
    }
    let c = sf.counts();
    if c.data_tx <= c.data_rx + 1 {
        return false;
    }
    matches!(data_neighbours(sf, x), Some((Dir::Tx, Dir::Tx)))
}

/// Owner of the nearest data Rx cell cyclically before `x`.
fn prev_rx_owner(sf: &Slotframe, x: usize) -> Option<NodeId> {
    let m = sf.len();
    (1..m)
        .map(|d| (x + m - d) % m)
        .find_map(|o| match sf.cell(o).kind {
            SlotType::UnicastData { peer, dir: Dir::Rx } => Some(peer),
            _ => None,
        })
}

/// Rx cells the parent could still grant, judged on its own frame alone.
/// This is the count advertised to children.
pub fn l_rx_available(parent: &Slotframe, is_root: bool) -> u32 {
    let mut work = parent.clone();
    let mut n = 0;
    while let Some(x) = (0..work.len()).find(|&x| rx_fits(&work, x, is_root)) {
        work.place(
            x,
            Cell::new(
                SlotType::UnicastData {
                    peer: work.owner(),
                    dir: Dir::Rx,
                },
                ChannelOffset(0),
            ),
        )
        .expect("offset checked free");
        n += 1;
    }
    n
}

/// Plans Rx grants for a batch of ADD requests. Nothing is mutated; commit
/// with [`commit_grant`].
pub fn grant_rx_cells(
    parent: &Slotframe,
    parent_is_root: bool,
    child_frames: &BTreeMap<NodeId, &Slotframe>,
    pending: &[(NodeId, u32)],
) -> BTreeMap<NodeId, GrantResult> {
    let mut work = parent.clone();
    let mut out: BTreeMap<NodeId, GrantResult> = BTreeMap::new();
    let mut remaining: BTreeMap<NodeId, u32> = BTreeMap::new();
    for &(c, n) in pending {
        *remaining.entry(c).or_default() += n;
        out.entry(c).or_default().requested += n;
    }
    let mut stuck: BTreeSet<NodeId> = BTreeSet::new();

    let find = |work: &Slotframe, c: NodeId, strict: bool| -> Option<usize> {
        let child = child_frames.get(&c)?;
        (0..work.len()).find(|&x| {
            child.is_free(x)
                && rx_fits(work, x, parent_is_root)
                && (!strict || prev_rx_owner(work, x) != Some(c))
        })
    };

    loop {
        let active: Vec<NodeId> = remaining
            .iter()
            .filter(|(c, &n)| n > 0 && !stuck.contains(*c))
            .map(|(&c, _)| c)
            .collect();
        if active.is_empty() {
            break;
        }
        let mut progress = false;
        for &c in &active {
            if remaining[&c] == 0 || stuck.contains(&c) {
                continue;
            }
            let others = remaining
                .iter()
                .any(|(o, &n)| *o != c && n > 0 && !stuck.contains(o));
            match find(&work, c, others) {
                Some(x) => {
                    work.place(
                        x,
                        Cell::new(
                            SlotType::UnicastData {
                                peer: c,
                                dir: Dir::Rx,
                            },
                            ChannelOffset(0),
                        ),
                    )
                    .expect("offset checked free");
                    out.get_mut(&c).unwrap().offsets.push(x);
                    *remaining.get_mut(&c).unwrap() -= 1;
                    progress = true;
                }
                None if !others => {
                    stuck.insert(c);
                }
                None => {}
            }
        }
        if !progress {
            // every active child is blocked by the interleave preference
            let mut placed = false;
            for &c in &active {
                if let Some(x) = find(&work, c, false) {
                    work.place(
                        x,
                        Cell::new(
                            SlotType::UnicastData {
                                peer: c,
                                dir: Dir::Rx,
                            },
                            ChannelOffset(0),
                        ),
                    )
                    .expect("offset checked free");
                    out.get_mut(&c).unwrap().offsets.push(x);
                    *remaining.get_mut(&c).unwrap() -= 1;
                    placed = true;
                    break;
                }
                stuck.insert(c);
            }
            if !placed {
                break;
            }
        }
    }
    for g in out.values_mut() {
        g.offsets.sort_unstable();
    }
    out
}

/// Writes a grant into the parent's frame (Rx) and the child's frame (Tx).
pub fn commit_grant(
    parent: &mut Slotframe,
    child: &mut Slotframe,
    offsets: &[usize],
    channel: ChannelOffset,
) {
    let (p, c) = (parent.owner(), child.owner());
    for &x in offsets {
        parent
            .place(
                x,
                Cell::new(
                    SlotType::UnicastData {
                        peer: c,
                        dir: Dir::Rx,
                    },
                    channel,
                ),
            )
            .expect("granted offset free in parent");
        child
            .place(
                x,
                Cell::new(
                    SlotType::UnicastData {
                        peer: p,
                        dir: Dir::Tx,
                    },
                    channel,
                ),
            )
            .expect("granted offset free in child");
    }
}

/// Up to `count` of the child's Tx cells toward `parent` that can be
/// released while the child's own frame keeps rules (a) and (b). Lowest
/// offsets first.
pub fn plan_delete(
    child: &Slotframe,
    parent: NodeId,
    count: u32,
    child_is_root: bool,
) -> Vec<usize> {
    let mut work = child.clone();
    let mut out = Vec::new();
    while (out.len() as u32) < count {
        let pick = work
            .offsets_where(|k| {
                *k == SlotType::UnicastData {
                    peer: parent,
                    dir: Dir::Tx,
                }
            })
            .into_iter()
            .find(|&x| {
                if child_is_root {
                    return true;
                }
                let c = work.counts();
                if c.data_rx > 0 && c.data_tx - 1 <= c.data_rx {
                    return false;
                }
                !matches!(data_neighbours(&work, x), Some((Dir::Rx, Dir::Rx)))
            });
        match pick {
            Some(x) => {
                work.clear(x);
                out.push(x);
            }
            None => break,
        }
    }
    out.sort_unstable();
    out
}

pub fn commit_delete(parent: &mut Slotframe, child: &mut Slotframe, offsets: &[usize]) {
    for &x in offsets {
        parent.clear(x);
        child.clear(x);
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum SixPKind {
    Add,
    Delete,
}

impl fmt::Display for SixPKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SixPKind::Add => "add",
            SixPKind::Delete => "delete",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SixPRequest {
    pub kind: SixPKind,
    pub src: NodeId,
    pub dst: NodeId,
    pub cell_count: u32,
    pub seq_num: u32,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SixPResponse {
    pub kind: SixPKind,
    pub seq_num: u32,
    pub offsets: Vec<usize>,
}

/// Last answered sequence number per (child, parent) link.
#[derive(Clone, Debug, Default)]
pub struct SixPLedger {
    last: HashMap<(NodeId, NodeId), (u32, SixPResponse)>,
}

impl SixPLedger {
    pub fn new() -> Self {
        Self::default()
    }
}

/// Executes one 6P transaction between `parent` and `child`. A repeated
/// sequence number returns the earlier response without touching the frames.
pub fn apply_six_p(
    ledger: &mut SixPLedger,
    parent: &mut Slotframe,
    parent_is_root: bool,
    child: &mut Slotframe,
    channel: ChannelOffset,
    req: SixPRequest,
) -> Result<SixPResponse, CellAllocError> {
    if req.cell_count == 0 {
        return Err(CellAllocError::ZeroCount);
    }
    let key = (req.src, req.dst);
    if let Some((last, resp)) = ledger.last.get(&key) {
        if *last == req.seq_num {
            return Ok(resp.clone());
        }
        if req.seq_num < *last {
            return Err(CellAllocError::StaleSeq {
                child: req.src,
                seq: req.seq_num,
                last: *last,
            });
        }
    }
    let offsets = match req.kind {
        SixPKind::Add => {
            let mut frames = BTreeMap::new();
            frames.insert(req.src, &*child);
            let g = grant_rx_cells(
                parent,
                parent_is_root,
                &frames,
                &[(req.src, req.cell_count)],
            );
            let offsets = g
                .get(&req.src)
                .map(|g| g.offsets.clone())
                .unwrap_or_default();
            if offsets.is_empty() {
                return Err(CellAllocError::NoCapacity {
                    parent: req.dst,
                    child: req.src,
                });
            }
            commit_grant(parent, child, &offsets, channel);
            offsets
        }
        SixPKind::Delete => {
            let offsets = plan_delete(child, req.dst, req.cell_count, false);
            commit_delete(parent, child, &offsets);
            offsets
        }
    };
    let resp = SixPResponse {
        kind: req.kind,
        seq_num: req.seq_num,
        offsets,
    };
    ledger.last.insert(key, (req.seq_num, resp.clone()));
    Ok(resp)
}

/// Parent-side consistency: its data Rx cells are exactly the union of its
/// children's data Tx cells toward it.
pub fn frames_consistent(parent: &Slotframe, children: &[&Slotframe]) -> bool {
    let p = parent.owner();
    let rx: BTreeSet<(usize, NodeId)> = parent
        .cells()
        .iter()
        .enumerate()
        .filter_map(|(i, c)| match c.kind {
            SlotType::UnicastData { peer, dir: Dir::Rx } => Some((i, peer)),
            _ => None,
        })
        .collect();
    let tx: BTreeSet<(usize, NodeId)> = children
        .iter()
        .flat_map(|sf| {
            sf.cells()
                .iter()
                .enumerate()
                .filter_map(move |(i, c)| match c.kind {
                    SlotType::UnicastData { peer, dir: Dir::Tx } if peer == p => {
                        Some((i, sf.owner()))
                    }
                    _ => None,
                })
        })
        .collect();
    rx == tx
}
