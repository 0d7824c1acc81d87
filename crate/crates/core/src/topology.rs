//! Static DODAG formation, node Ranks and link quality.
//!
//! Parent selection is hop-count BFS with a per-node children cap, standing
//! in for RPL. Ranks follow `Rank_i = rank_min + hops * min_step_of_rank`.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Rank of a DODAG root.
pub const RANK_MIN: u32 = 256;
/// Rank increase per hop.
pub const MIN_STEP_OF_RANK: u32 = 256;
/// Upper bound on any ETX value; keeps the game's cost denominator finite.
pub const ETX_MAX: f64 = 8.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct NodeId(pub u16);

impl NodeId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl From<u16> for NodeId {
    fn from(v: u16) -> Self {
        NodeId(v)
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TopologyError {
    #[error("nodes unreachable from root {root} under the children cap: {unreachable:?}")]
    DisconnectedTopology {
        root: NodeId,
        unreachable: Vec<NodeId>,
    },
    #[error("node {0} is a root and has no rank ratio")]
    RootHasNoRankBar(NodeId),
    #[error("node {0} is not part of this DODAG")]
    UnknownNode(NodeId),
    #[error("invalid topology: {0}")]
    Invalid(String),
}

/// A directional link record. Links are created in symmetric pairs.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Link {
    pub src: NodeId,
    pub dst: NodeId,
    pub prr: f64,
}

impl Link {
    pub fn new(src: NodeId, dst: NodeId, prr: f64) -> Self {
        Self { src, dst, prr }
    }

    pub fn usable(&self) -> bool {
        self.prr > 0.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Position {
    pub x: f64,
    pub y: f64,
}

impl Position {
    pub fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn distance(&self, other: &Position) -> f64 {
        ((self.x - other.x).powi(2) + (self.y - other.y).powi(2)).sqrt()
    }
}

/// Rank parameters. Only Rank differences reach the game, so hop-count rank
/// is the default rule.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RankRule {
    pub rank_min: u32,
    pub min_step_of_rank: u32,
}

impl Default for RankRule {
    fn default() -> Self {
        Self {
            rank_min: RANK_MIN,
            min_step_of_rank: MIN_STEP_OF_RANK,
        }
    }
}

/// Routing tree rooted at a border router.
#[derive(Clone, Debug, PartialEq)]
pub struct Dodag {
    root: NodeId,
    parent: BTreeMap<NodeId, NodeId>,
    children: BTreeMap<NodeId, Vec<NodeId>>,
    rank: BTreeMap<NodeId, u32>,
    min_step_of_rank: u32,
    rank_min: u32,
    max_children: usize,
}

impl Dodag {
    /// Rebuilds a DODAG from an explicit parent map. Children are ordered by
    /// ascending id.
    pub fn from_parents(
        root: NodeId,
        parents: &BTreeMap<NodeId, NodeId>,
        rule: RankRule,
        max_children: usize,
    ) -> Result<Self, TopologyError> {
        if parents.contains_key(&root) {
            return Err(TopologyError::Invalid(format!("root {root} has a parent")));
        }
        let mut children: BTreeMap<NodeId, Vec<NodeId>> = BTreeMap::new();
        children.insert(root, Vec::new());
        for (&c, &p) in parents {
            children.entry(p).or_default().push(c);
            children.entry(c).or_default();
        }
        for list in children.values_mut() {
            list.sort();
        }
        if let Some((p, list)) = children.iter().find(|(_, l)| l.len() > max_children) {
            return Err(TopologyError::Invalid(format!(
                "node {p} has {} children, cap is {max_children}",
                list.len()
            )));
        }

        let mut rank = BTreeMap::new();
        rank.insert(root, rule.rank_min);
        let mut frontier = vec![root];
        while let Some(n) = frontier.pop() {
            let r = rank[&n];
            for &c in &children[&n] {
                if rank.insert(c, r + rule.min_step_of_rank).is_some() {
                    return Err(TopologyError::Invalid(format!("node {c} reached twice")));
                }
                frontier.push(c);
            }
        }
        let unreachable: Vec<NodeId> = children
            .keys()
            .filter(|n| !rank.contains_key(n))
            .copied()
            .collect();
        if !unreachable.is_empty() {
            return Err(TopologyError::DisconnectedTopology { root, unreachable });
        }
        Ok(Self {
            root,
            parent: parents.clone(),
            children,
            rank,
            min_step_of_rank: rule.min_step_of_rank,
            rank_min: rule.rank_min,
            max_children,
        })
    }

    pub fn root(&self) -> NodeId {
        self.root
    }

    pub fn is_root(&self, n: NodeId) -> bool {
        n == self.root
    }

    pub fn contains(&self, n: NodeId) -> bool {
        self.rank.contains_key(&n)
    }

    pub fn len(&self) -> usize {
        self.rank.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rank.is_empty()
    }

    pub fn parent(&self, n: NodeId) -> Option<NodeId> {
        self.parent.get(&n).copied()
    }

    pub fn parents(&self) -> &BTreeMap<NodeId, NodeId> {
        &self.parent
    }

    pub fn children(&self, n: NodeId) -> &[NodeId] {
        self.children.get(&n).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn rank(&self, n: NodeId) -> Option<u32> {
        self.rank.get(&n).copied()
    }

    pub fn hops(&self, n: NodeId) -> Option<u32> {
        self.rank(n)
            .map(|r| (r - self.rank_min) / self.min_step_of_rank)
    }

    pub fn rank_min(&self) -> u32 {
        self.rank_min
    }

    pub fn min_step_of_rank(&self) -> u32 {
        self.min_step_of_rank
    }

    pub fn max_children(&self) -> usize {
        self.max_children
    }

    /// Members in ascending id order.
    pub fn members(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.rank.keys().copied()
    }

    /// Members in breadth-first order from the root, children in child order.
    pub fn bfs_order(&self) -> Vec<NodeId> {
        let mut out = vec![self.root];
        let mut i = 0;
        while i < out.len() {
            let n = out[i];
            out.extend_from_slice(self.children(n));
            i += 1;
        }
        out
    }
}

/// Builds one DODAG over nodes `0..nodes` rooted at `root`.
pub fn build_dodag(
    nodes: usize,
    links: &[Link],
    root: NodeId,
    max_children: usize,
) -> Result<Dodag, TopologyError> {
    let members: BTreeSet<NodeId> = (0..nodes).map(|i| NodeId(i as u16)).collect();
    build_dodag_among(&members, links, root, max_children, RankRule::default())
}

/// Builds one DODAG per root. Every node must belong to the connected
/// component of exactly one root.
pub fn build_forest(
    nodes: usize,
    links: &[Link],
    roots: &[NodeId],
    max_children: usize,
    rule: RankRule,
) -> Result<Vec<Dodag>, TopologyError> {
    let adj = adjacency(nodes, links);
    let mut owner: BTreeMap<NodeId, NodeId> = BTreeMap::new();
    for &r in roots {
        if r.index() >= nodes {
            return Err(TopologyError::UnknownNode(r));
        }
        let mut stack = vec![r];
        while let Some(n) = stack.pop() {
            match owner.get(&n) {
                Some(&o) if o == r => continue,
                Some(&o) => {
                    return Err(TopologyError::Invalid(format!(
                        "roots {o} and {r} are connected"
                    )))
                }
                None => {
                    owner.insert(n, r);
                    stack.extend(adj[n.index()].iter().copied());
                }
            }
        }
    }
    let mut out = Vec::with_capacity(roots.len());
    for &r in roots {
        let members: BTreeSet<NodeId> = owner
            .iter()
            .filter(|(_, &o)| o == r)
            .map(|(&n, _)| n)
            .collect();
        out.push(build_dodag_among(&members, links, r, max_children, rule)?);
    }
    let orphans: Vec<NodeId> = (0..nodes as u16)
        .map(NodeId)
        .filter(|n| !owner.contains_key(n))
        .collect();
    if !orphans.is_empty() {
        return Err(TopologyError::DisconnectedTopology {
            root: roots.first().copied().unwrap_or(NodeId(0)),
            unreachable: orphans,
        });
    }
    Ok(out)
}

fn adjacency(nodes: usize, links: &[Link]) -> Vec<BTreeSet<NodeId>> {
    let mut adj = vec![BTreeSet::new(); nodes];
    for l in links.iter().filter(|l| l.usable()) {
        if l.src.index() < nodes && l.dst.index() < nodes && l.src != l.dst {
            adj[l.src.index()].insert(l.dst);
            adj[l.dst.index()].insert(l.src);
        }
    }
    adj
}

fn build_dodag_among(
    members: &BTreeSet<NodeId>,
    links: &[Link],
    root: NodeId,
    max_children: usize,
    rule: RankRule,
) -> Result<Dodag, TopologyError> {
    if max_children == 0 {
        return Err(TopologyError::Invalid(
            "max_children must be at least 1".into(),
        ));
    }
    if !members.contains(&root) {
        return Err(TopologyError::UnknownNode(root));
    }
    let n_max = members.iter().map(|n| n.index() + 1).max().unwrap_or(0);
    let adj = adjacency(n_max, links);

    let mut parents = BTreeMap::new();
    let mut child_count: BTreeMap<NodeId, usize> = BTreeMap::new();
    let mut remaining: BTreeSet<NodeId> = members.iter().copied().filter(|&n| n != root).collect();
    let mut frontier = vec![root];
    while !remaining.is_empty() && !frontier.is_empty() {
        let mut next = Vec::new();
        for &u in remaining.iter() {
            let pick = frontier.iter().copied().find(|p| {
                adj[u.index()].contains(p)
                    && child_count.get(p).copied().unwrap_or(0) < max_children
            });
            if let Some(p) = pick {
                parents.insert(u, p);
                *child_count.entry(p).or_default() += 1;
                next.push(u);
            }
        }
        for u in &next {
            remaining.remove(u);
        }
        frontier = next;
    }
    if !remaining.is_empty() {
        return Err(TopologyError::DisconnectedTopology {
            root,
            unreachable: remaining.into_iter().collect(),
        });
    }
    Dodag::from_parents(root, &parents, rule, max_children)
}

/// `MinStepofRank / (Rank_i - Rank_min)`; equals `1/hops` under hop-count rank.
pub fn rank_bar(d: &Dodag, i: NodeId) -> Result<f64, TopologyError> {
    if d.is_root(i) {
        return Err(TopologyError::RootHasNoRankBar(i));
    }
    let r = d.rank(i).ok_or(TopologyError::UnknownNode(i))?;
    Ok(d.min_step_of_rank() as f64 / (r - d.rank_min()) as f64)
}

/// `1/prr`, capped at [`ETX_MAX`].
pub fn etx_of(prr: f64) -> f64 {
    etx_of_capped(prr, ETX_MAX)
}

pub fn etx_of_capped(prr: f64, cap: f64) -> f64 {
    if prr <= 0.0 {
        return cap;
    }
    (1.0 / prr).clamp(1.0, cap)
}

/// Attempt/success counters for one link over one observation window.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct LinkStats {
    pub attempts: u64,
    pub successes: u64,
}

/// ETX of a single window of link statistics, no history.
pub fn estimate_etx(stats: LinkStats, smoothing: f64) -> f64 {
    let mut est = EtxEstimator::new(smoothing);
    est.update(stats)
}

/// EWMA of attempts-per-delivered-packet.
#[derive(Clone, Debug)]
pub struct EtxEstimator {
    smoothing: f64,
    current: Option<f64>,
}

impl EtxEstimator {
    pub fn new(smoothing: f64) -> Self {
        Self {
            smoothing,
            current: None,
        }
    }

    /// Starts from a prior estimate, e.g. the link's PRR at formation time.
    pub fn with_prior(smoothing: f64, prior: f64) -> Self {
        Self {
            smoothing,
            current: Some(prior.clamp(1.0, ETX_MAX)),
        }
    }

    pub fn update(&mut self, window: LinkStats) -> f64 {
        let sample = match (window.attempts, window.successes) {
            (0, _) => None,
            (_, 0) => Some(ETX_MAX),
            (a, s) => Some((a as f64 / s as f64).clamp(1.0, ETX_MAX)),
        };
        if let Some(sample) = sample {
            self.current = Some(match self.current {
                Some(prev) => self.smoothing * prev + (1.0 - self.smoothing) * sample,
                None => sample,
            });
        }
        self.value()
    }

    pub fn value(&self) -> f64 {
        self.current.unwrap_or(ETX_MAX)
    }
}

/// Symmetric links for every pair within `range` (unit-disk model).
pub fn unit_disk_links(positions: &[Position], range: f64, prr: f64) -> Vec<Link> {
    let mut links = Vec::new();
    for (i, a) in positions.iter().enumerate() {
        for (j, b) in positions.iter().enumerate().skip(i + 1) {
            if a.distance(b) <= range {
                let (i, j) = (NodeId(i as u16), NodeId(j as u16));
                links.push(Link::new(i, j, prr));
                links.push(Link::new(j, i, prr));
            }
        }
    }
    links
}

/// Node coordinates plus the roots they are organised around.
#[derive(Clone, Debug, PartialEq)]
pub struct Layout {
    pub positions: Vec<Position>,
    pub roots: Vec<NodeId>,
}

/// Two-ring clusters, one per DODAG, spaced far enough apart that they never
/// hear each other.
///
/// Each cluster has a root, up to `first_ring` one-hop nodes on an arc at
/// `0.7 * range`, and the remaining nodes at `1.5 * range`, dealt round-robin
/// behind the one-hop nodes. The result is a two-level tree under hop-count
/// BFS.
pub fn cluster_layout(
    dodags: usize,
    nodes_per_dodag: usize,
    first_ring: usize,
    range: f64,
) -> Layout {
    let mut positions = Vec::new();
    let mut roots = Vec::new();
    let first_ring = first_ring.max(1);
    for d in 0..dodags {
        let cx = d as f64 * 20.0 * range;
        roots.push(NodeId(positions.len() as u16));
        positions.push(Position::new(cx, 0.0));
        let rest = nodes_per_dodag.saturating_sub(1);
        let ring1 = rest.min(first_ring);
        let angle_of = |k: usize| -> f64 {
            if ring1 == 1 {
                90f64.to_radians()
            } else {
                (30.0 + 120.0 * k as f64 / (ring1 - 1) as f64).to_radians()
            }
        };
        for k in 0..ring1 {
            let a = angle_of(k);
            positions.push(Position::new(
                cx + 0.7 * range * a.cos(),
                0.7 * range * a.sin(),
            ));
        }
        let ring2 = rest - ring1;
        // per-parent slot counts so siblings fan out around their parent
        let mut per_parent = vec![0usize; ring1.max(1)];
        for k in 0..ring2 {
            per_parent[k % ring1.max(1)] += 1;
        }
        let mut placed = vec![0usize; ring1.max(1)];
        for k in 0..ring2 {
            let p = k % ring1.max(1);
            let total = per_parent[p];
            let spread = if total <= 1 {
                0.0
            } else {
                -12.0 + 24.0 * placed[p] as f64 / (total - 1) as f64
            };
            placed[p] += 1;
            let a = angle_of(p) + spread.to_radians();
            positions.push(Position::new(
                cx + 1.5 * range * a.cos(),
                1.5 * range * a.sin(),
            ));
        }
    }
    Layout { positions, roots }
}

/// Symmetric links of a seven-node reference tree: 0 is the root; 1, 2, 3
/// hang off 0; 4 and 5 off 1; 6 off 2. Siblings hear each other.
pub fn seven_node_tree_links() -> Vec<Link> {
    let pairs = [
        (0, 1),
        (0, 2),
        (0, 3),
        (1, 4),
        (1, 5),
        (2, 6),
        (1, 2),
        (2, 3),
        (4, 5),
    ];
    pairs
        .iter()
        .flat_map(|&(a, b)| {
            [
                Link::new(NodeId(a), NodeId(b), 1.0),
                Link::new(NodeId(b), NodeId(a), 1.0),
            ]
        })
        .collect()
}
