//! Interference-aware channel allocation.
//!
//! Every parent receives from all of its children on a single channel. The
//! channel a node uses toward its parent arrives in the parent's EB; the
//! channel it will receive on from its own children is obtained with an
//! ASK-CHANNEL request to the parent. Parents answer with a channel that is
//! neither the broadcast channel, nor one of their own two channels, nor one
//! already given to a sibling. This keeps every channel unique on three-hop
//! routing paths and caps the number of children at `|F| - 3`.

use std::collections::{BTreeMap, HashMap};
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::topology::{Dodag, NodeId};

/// Channel offset into the hopping sequence.
#[derive(
    Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
pub struct ChannelOffset(pub u8);

impl fmt::Display for ChannelOffset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// The broadcast channel is pinned to offset 0.
pub const F_BCAST: ChannelOffset = ChannelOffset(0);

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ChannelError {
    #[error("node {node} has {children} children; at most {max} fit in {num_channels} channels")]
    TooManyChildren {
        node: NodeId,
        children: usize,
        max: usize,
        num_channels: u8,
    },
    #[error("at least 4 channels are required, got {0}")]
    NotEnoughChannels(u8),
    #[error("no channel left for child {child} of {parent}")]
    NoChannelAvailable { parent: NodeId, child: NodeId },
    #[error("node {0} has not received its parent's EB yet")]
    NoParentChannel(NodeId),
    #[error("{child} is not a child of {parent}")]
    NotAChild { parent: NodeId, child: NodeId },
}

/// How the root picks its receive channel.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum RootChannel {
    /// Lowest offset other than the broadcast channel.
    #[default]
    Lowest,
    /// Uniform draw from `F \ {f_bcast}` with the given seed.
    Seeded(u64),
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ChannelPlan {
    pub num_channels: u8,
    pub f_bcast: ChannelOffset,
    pub to_parent: BTreeMap<NodeId, ChannelOffset>,
    pub to_children: BTreeMap<NodeId, ChannelOffset>,
}

impl ChannelPlan {
    pub fn to_parent(&self, n: NodeId) -> Option<ChannelOffset> {
        self.to_parent.get(&n).copied()
    }

    pub fn to_children(&self, n: NodeId) -> Option<ChannelOffset> {
        self.to_children.get(&n).copied()
    }

    /// Union of plans for disjoint DODAGs.
    pub fn merge(&mut self, other: &ChannelPlan) {
        self.num_channels = self.num_channels.max(other.num_channels);
        self.to_parent
            .extend(other.to_parent.iter().map(|(k, v)| (*k, *v)));
        self.to_children
            .extend(other.to_children.iter().map(|(k, v)| (*k, *v)));
    }

    /// Human-readable table: a header line, then
    /// `node,parent,to_parent,to_children` rows (`-` for absent values).
    pub fn to_table(&self, parents: &BTreeMap<NodeId, NodeId>) -> String {
        let mut out = format!(
            "# f_bcast={} channels={}\nnode,parent,to_parent,to_children\n",
            self.f_bcast, self.num_channels
        );
        let mut nodes: Vec<NodeId> = self
            .to_parent
            .keys()
            .chain(self.to_children.keys())
            .copied()
            .collect();
        nodes.sort();
        nodes.dedup();
        let dash = |v: Option<String>| v.unwrap_or_else(|| "-".to_string());
        for n in nodes {
            out.push_str(&format!(
                "{},{},{},{}\n",
                n,
                dash(parents.get(&n).map(|p| p.to_string())),
                dash(self.to_parent(n).map(|c| c.to_string())),
                dash(self.to_children(n).map(|c| c.to_string())),
            ));
        }
        out
    }

    /// Inverse of [`ChannelPlan::to_table`]. Returns the parent map as well.
    pub fn from_table(text: &str) -> Result<(ChannelPlan, BTreeMap<NodeId, NodeId>), String> {
        let mut plan = ChannelPlan::default();
        let mut parents = BTreeMap::new();
        let mut saw_header = false;
        let mut rows = 0;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            let lineno = lineno + 1;
            if line.is_empty() {
                continue;
            }
            if let Some(meta) = line.strip_prefix('#') {
                for kv in meta.split_whitespace() {
                    let (k, v) = kv
                        .split_once('=')
                        .ok_or_else(|| format!("line {lineno}: bad header field `{kv}`"))?;
                    let v: u8 = v
                        .parse()
                        .map_err(|_| format!("line {lineno}: bad value for `{k}`"))?;
                    match k {
                        "f_bcast" => plan.f_bcast = ChannelOffset(v),
                        "channels" => plan.num_channels = v,
                        other => {
                            return Err(format!("line {lineno}: unknown header key `{other}`"))
                        }
                    }
                }
                continue;
            }
            if line == "node,parent,to_parent,to_children" {
                saw_header = true;
                continue;
            }
            let cols: Vec<&str> = line.split(',').map(str::trim).collect();
            if cols.len() != 4 {
                return Err(format!(
                    "line {lineno}: expected 4 columns, got {}",
                    cols.len()
                ));
            }
            let node = NodeId(
                cols[0]
                    .parse()
                    .map_err(|_| format!("line {lineno}: bad node `{}`", cols[0]))?,
            );
            let opt = |s: &str, what: &str| -> Result<Option<u16>, String> {
                if s == "-" {
                    Ok(None)
                } else {
                    s.parse()
                        .map(Some)
                        .map_err(|_| format!("line {lineno}: bad {what} `{s}`"))
                }
            };
            if let Some(p) = opt(cols[1], "parent")? {
                parents.insert(node, NodeId(p));
            }
            if let Some(c) = opt(cols[2], "to_parent")? {
                plan.to_parent.insert(node, ChannelOffset(c as u8));
            }
            if let Some(c) = opt(cols[3], "to_children")? {
                plan.to_children.insert(node, ChannelOffset(c as u8));
            }
            rows += 1;
        }
        if !saw_header || rows == 0 {
            return Err("empty channel plan".to_string());
        }
        Ok((plan, parents))
    }
}

/// ASK-CHANNEL message. `channel_offset` is set on responses only.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AskChannelMessage {
    pub kind: AskKind,
    pub src: NodeId,
    pub dst: NodeId,
    pub seq_num: u32,
    pub channel_offset: Option<ChannelOffset>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AskKind {
    Request,
    Response,
}

/// Formation-phase channel state for one DODAG: EBs carry the parent's
/// receive channel down, ASK-CHANNEL exchanges hand out child channels.
/// Formation is reliable, so every exchange completes.
#[derive(Clone, Debug)]
pub struct ChannelFormation<'a> {
    dodag: &'a Dodag,
    plan: ChannelPlan,
    answered: HashMap<(NodeId, NodeId), (u32, AskChannelMessage)>,
}

impl<'a> ChannelFormation<'a> {
    pub fn new(
        dodag: &'a Dodag,
        num_channels: u8,
        root: RootChannel,
    ) -> Result<Self, ChannelError> {
        if num_channels < 4 {
            return Err(ChannelError::NotEnoughChannels(num_channels));
        }
        let max = num_channels as usize - 3;
        for n in dodag.members() {
            let c = dodag.children(n).len();
            if c > max {
                return Err(ChannelError::TooManyChildren {
                    node: n,
                    children: c,
                    max,
                    num_channels,
                });
            }
        }
        let root_channel = match root {
            RootChannel::Lowest => ChannelOffset(1),
            RootChannel::Seeded(seed) => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                ChannelOffset(rng.gen_range(1..num_channels))
            }
        };
        let mut plan = ChannelPlan {
            num_channels,
            f_bcast: F_BCAST,
            ..Default::default()
        };
        plan.to_children.insert(dodag.root(), root_channel);
        Ok(Self {
            dodag,
            plan,
            answered: HashMap::new(),
        })
    }

    /// The child hears its parent's EB and learns its uplink channel.
    pub fn receive_eb(&mut self, child: NodeId) -> Result<ChannelOffset, ChannelError> {
        let parent = self
            .dodag
            .parent(child)
            .ok_or(ChannelError::NoParentChannel(child))?;
        let ch = self
            .plan
            .to_children(parent)
            .ok_or(ChannelError::NoParentChannel(parent))?;
        self.plan.to_parent.insert(child, ch);
        Ok(ch)
    }

    /// One ASK-CHANNEL request/response pair. Retransmitting the same `seq`
    /// returns the original response unchanged.
    pub fn ask_channel(
        &mut self,
        parent: NodeId,
        child: NodeId,
        seq: u32,
    ) -> Result<(AskChannelMessage, AskChannelMessage), ChannelError> {
        if self.dodag.parent(child) != Some(parent) {
            return Err(ChannelError::NotAChild { parent, child });
        }
        if self.plan.to_parent(child).is_none() {
            return Err(ChannelError::NoParentChannel(child));
        }
        let request = AskChannelMessage {
            kind: AskKind::Request,
            src: child,
            dst: parent,
            seq_num: seq,
            channel_offset: None,
        };
        if let Some((prev_seq, resp)) = self.answered.get(&(child, parent)) {
            if *prev_seq == seq {
                return Ok((request, *resp));
            }
        }
        let ch = match self.plan.to_children(child) {
            Some(ch) => ch,
            None => {
                let ch = self
                    .pick_child_channel(parent, child)
                    .ok_or(ChannelError::NoChannelAvailable { parent, child })?;
                self.plan.to_children.insert(child, ch);
                ch
            }
        };
        let response = AskChannelMessage {
            kind: AskKind::Response,
            src: parent,
            dst: child,
            seq_num: seq,
            channel_offset: Some(ch),
        };
        self.answered.insert((child, parent), (seq, response));
        Ok((request, response))
    }

    fn pick_child_channel(&self, parent: NodeId, child: NodeId) -> Option<ChannelOffset> {
        let mut excluded = vec![self.plan.f_bcast];
        excluded.extend(self.plan.to_parent(parent));
        excluded.extend(self.plan.to_children(parent));
        for &sib in self.dodag.children(parent) {
            if sib != child {
                excluded.extend(self.plan.to_children(sib));
            }
        }
        (0..self.plan.num_channels)
            .map(ChannelOffset)
            .find(|c| !excluded.contains(c))
    }

    pub fn plan(&self) -> &ChannelPlan {
        &self.plan
    }

    pub fn into_plan(self) -> ChannelPlan {
        self.plan
    }
}

/// Runs the full EB + ASK-CHANNEL formation top-down.
pub fn allocate_channels(d: &Dodag, num_channels: u8) -> Result<ChannelPlan, ChannelError> {
    allocate_channels_with(d, num_channels, RootChannel::Lowest)
}

pub fn allocate_channels_with(
    d: &Dodag,
    num_channels: u8,
    root: RootChannel,
) -> Result<ChannelPlan, ChannelError> {
    let mut f = ChannelFormation::new(d, num_channels, root)?;
    for n in d.bfs_order() {
        for &c in d.children(n) {
            f.receive_eb(c)?;
            f.ask_channel(n, c, 0)?;
        }
    }
    Ok(f.into_plan())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ViolationKind {
    MissingChannel,
    OutOfRange,
    /// `to_parent[i] != to_children[parent[i]]`.
    ParentMismatch,
    BroadcastConflict,
    /// A node's child channel equals its own uplink channel.
    UplinkConflict,
    SiblingConflict,
    /// A node's child channel equals its grandparent's child channel.
    ThreeHopConflict,
}

impl fmt::Display for ViolationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            ViolationKind::MissingChannel => "MissingChannel",
            ViolationKind::OutOfRange => "OutOfRange",
            ViolationKind::ParentMismatch => "ParentMismatch",
            ViolationKind::BroadcastConflict => "BroadcastConflict",
            ViolationKind::UplinkConflict => "UplinkConflict",
            ViolationKind::SiblingConflict => "SiblingConflict",
            ViolationKind::ThreeHopConflict => "ThreeHopConflict",
        };
        f.write_str(s)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Violation {
    pub kind: ViolationKind,
    pub node: NodeId,
    pub other: Option<NodeId>,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.other {
            Some(o) => write!(f, "{} at node {} (with {})", self.kind, self.node, o),
            None => write!(f, "{} at node {}", self.kind, self.node),
        }
    }
}

/// Lists every violated plan invariant over the members of `d`.
pub fn validate_channel_plan(d: &Dodag, plan: &ChannelPlan) -> Vec<Violation> {
    let mut out = Vec::new();
    let v = |kind, node, other| Violation { kind, node, other };
    let in_range = |c: ChannelOffset| plan.num_channels == 0 || c.0 < plan.num_channels;

    for n in d.members() {
        for c in plan.to_parent(n).into_iter().chain(plan.to_children(n)) {
            if !in_range(c) {
                out.push(v(ViolationKind::OutOfRange, n, None));
            }
        }
        let has_children = !d.children(n).is_empty();
        let own = plan.to_children(n);
        if own.is_none() && has_children {
            out.push(v(ViolationKind::MissingChannel, n, None));
        }
        if own == Some(plan.f_bcast) {
            out.push(v(ViolationKind::BroadcastConflict, n, None));
        }
        let Some(p) = d.parent(n) else { continue };
        let up = plan.to_parent(n);
        if up.is_none() {
            out.push(v(ViolationKind::MissingChannel, n, Some(p)));
        } else if up != plan.to_children(p) {
            out.push(v(ViolationKind::ParentMismatch, n, Some(p)));
        }
        if let (Some(own), Some(up)) = (own, up) {
            if own == up {
                out.push(v(ViolationKind::UplinkConflict, n, Some(p)));
            }
        }
        if let (Some(own), Some(gp)) = (own, d.parent(p)) {
            if plan.to_children(gp) == Some(own) {
                out.push(v(ViolationKind::ThreeHopConflict, n, Some(gp)));
            }
        }
    }
    for n in d.members() {
        let kids = d.children(n);
        for (a_i, &a) in kids.iter().enumerate() {
            for &b in &kids[a_i + 1..] {
                if let (Some(x), Some(y)) = (plan.to_children(a), plan.to_children(b)) {
                    if x == y {
                        out.push(v(ViolationKind::SiblingConflict, a, Some(b)));
                    }
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::topology::{build_dodag, seven_node_tree_links, Link};

    fn fig2() -> Dodag {
        build_dodag(7, &seven_node_tree_links(), NodeId(0), 3).unwrap()
    }

    fn chain(n: u16) -> Dodag {
        let links: Vec<Link> = (0..n - 1)
            .flat_map(|i| {
                [
                    Link::new(NodeId(i), NodeId(i + 1), 1.0),
                    Link::new(NodeId(i + 1), NodeId(i), 1.0),
                ]
            })
            .collect();
        build_dodag(n as usize, &links, NodeId(0), 3).unwrap()
    }

    #[test]
    fn fig2_plan_is_clean() {
        let d = fig2();
        let plan = allocate_channels(&d, 7).unwrap();
        assert!(validate_channel_plan(&d, &plan).is_empty());
        let a_rx = plan.to_children(NodeId(0)).unwrap();
        for c in [1, 2, 3] {
            assert_eq!(plan.to_parent(NodeId(c)), Some(a_rx));
        }
        // B, C, D each get a distinct child channel
        let b = plan.to_children(NodeId(1)).unwrap();
        let c = plan.to_children(NodeId(2)).unwrap();
        let dd = plan.to_children(NodeId(3)).unwrap();
        assert!(b != c && c != dd && b != dd);
    }

    #[test]
    fn chain_consecutive_hops_differ() {
        let d = chain(3);
        let plan = allocate_channels(&d, 4).unwrap();
        assert!(validate_channel_plan(&d, &plan).is_empty());
        assert_ne!(plan.to_parent(NodeId(1)), plan.to_parent(NodeId(2)));
    }

    #[test]
    fn too_many_children() {
        let links: Vec<Link> = (1..=5)
            .flat_map(|i| {
                [
                    Link::new(NodeId(0), NodeId(i), 1.0),
                    Link::new(NodeId(i), NodeId(0), 1.0),
                ]
            })
            .collect();
        let d = build_dodag(6, &links, NodeId(0), 5).unwrap();
        assert_eq!(
            allocate_channels(&d, 7),
            Err(ChannelError::TooManyChildren {
                node: NodeId(0),
                children: 5,
                max: 4,
                num_channels: 7
            })
        );
        assert!(allocate_channels(&d, 8).is_ok());
    }

    #[test]
    fn ask_channel_flow() {
        let d = fig2();
        let mut f = ChannelFormation::new(&d, 7, RootChannel::Lowest).unwrap();
        // B asks before hearing the EB
        assert_eq!(
            f.ask_channel(NodeId(0), NodeId(1), 1),
            Err(ChannelError::NoParentChannel(NodeId(1)))
        );
        f.receive_eb(NodeId(1)).unwrap();
        let (req, resp) = f.ask_channel(NodeId(0), NodeId(1), 1).unwrap();
        assert_eq!(req.kind, AskKind::Request);
        assert_eq!(resp.seq_num, req.seq_num);
        assert_eq!(resp.channel_offset, Some(ChannelOffset(2)));
        let (_, again) = f.ask_channel(NodeId(0), NodeId(1), 1).unwrap();
        assert_eq!(again, resp);
    }

    #[test]
    fn formation_matches_allocation() {
        let d = fig2();
        let plan = allocate_channels(&d, 7).unwrap();
        let mut f = ChannelFormation::new(&d, 7, RootChannel::Lowest).unwrap();
        for n in d.bfs_order() {
            for &c in d.children(n) {
                f.receive_eb(c).unwrap();
                let (_, r) = f.ask_channel(n, c, 7).unwrap();
                assert_eq!(r.channel_offset, plan.to_children(c));
            }
        }
        // a leaf that never has children is still answered
        assert!(d.children(NodeId(6)).is_empty());
        assert!(f.plan().to_children(NodeId(6)).is_some());
    }

    #[test]
    fn injected_violations() {
        let d = fig2();
        let mut plan = allocate_channels(&d, 7).unwrap();
        let b = plan.to_children(NodeId(1)).unwrap();
        plan.to_children.insert(NodeId(2), b);
        // re-point 6's uplink so only the sibling rule trips
        plan.to_parent.insert(NodeId(6), b);
        plan.to_children.remove(&NodeId(6));
        let v = validate_channel_plan(&d, &plan);
        assert_eq!(v.len(), 1, "{v:?}");
        assert_eq!(v[0].kind, ViolationKind::SiblingConflict);

        let mut plan = allocate_channels(&d, 7).unwrap();
        plan.to_children.insert(NodeId(4), F_BCAST);
        let v = validate_channel_plan(&d, &plan);
        assert_eq!(v.len(), 1, "{v:?}");
        assert_eq!(v[0].kind, ViolationKind::BroadcastConflict);
    }

    #[test]
    fn seeded_root_is_deterministic() {
        let d = fig2();
        let a = allocate_channels_with(&d, 8, RootChannel::Seeded(9)).unwrap();
        let b = allocate_channels_with(&d, 8, RootChannel::Seeded(9)).unwrap();
        assert_eq!(a, b);
        assert!(validate_channel_plan(&d, &a).is_empty());
    }

    #[test]
    fn table_round_trip() {
        let d = fig2();
        let plan = allocate_channels(&d, 7).unwrap();
        let text = plan.to_table(d.parents());
        let (back, parents) = ChannelPlan::from_table(&text).unwrap();
        assert_eq!(back, plan);
        assert_eq!(&parents, d.parents());
        assert!(ChannelPlan::from_table("").is_err());
    }

    proptest::proptest! {
        #[test]
        fn random_trees_validate(seed in 0u64..u64::MAX, n in 1usize..40, channels in 4u8..16) {
            let cap = channels as usize - 3;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut parents = BTreeMap::new();
            let mut load = vec![0usize; n];
            for i in 1..n {
                let open: Vec<usize> = (0..i).filter(|&p| load[p] < cap).collect();
                let p = open[rng.gen_range(0..open.len())];
                load[p] += 1;
                parents.insert(NodeId(i as u16), NodeId(p as u16));
            }
            let d = Dodag::from_parents(NodeId(0), &parents, Default::default(), cap).unwrap();
            let plan = allocate_channels(&d, channels).unwrap();
            proptest::prop_assert!(validate_channel_plan(&d, &plan).is_empty());
            proptest::prop_assert_eq!(&plan, &allocate_channels(&d, channels).unwrap());
        }
    }
}
