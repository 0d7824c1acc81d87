//! Deterministic slot-driven simulator.
//!
//! Every slot each node picks one action from its schedule (transmit,
//! listen or sleep), transmissions are resolved against the interference
//! and link-loss model, and packets move hop by hop toward the roots. Under
//! GT-TSCH, every `update_period` slots parents grant the ADD requests they
//! received and each node re-evaluates its Tx-cell demand.
//!
//! Randomness comes from two independent sources: per-node traffic streams
//! that depend only on the seed and node id, and one medium stream for link
//! losses and backoff draws. Traffic is therefore identical across
//! schedulers for the same seed.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::baseline::{
    build_orchestra_frames, OrchestraAction, OrchestraConfig, OrchestraSchedule,
};
use crate::cellalloc::{
    commit_delete, commit_grant, compute_l_tx_min, delete_count, grant_rx_cells, l_rx_available,
    plan_delete, request_size, SixPKind, SixPRequest,
};
use crate::channels::{allocate_channels, ChannelError, ChannelOffset, ChannelPlan};
use crate::game::{ewma_queue, GameParams};
use crate::slotframe::{build_gt_frames, Dir, SlotType, Slotframe, SlotframeError};
use crate::topology::{
    build_forest, cluster_layout, rank_bar, unit_disk_links, Dodag, EtxEstimator, Link, LinkStats,
    NodeId, Position, RankRule, TopologyError,
};
use crate::SLOTS_PER_MINUTE;

/// Default channel hopping sequence.
pub const DEFAULT_HOPPING: [u8; 8] = [17, 23, 15, 25, 19, 11, 13, 21];

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid scenario: {0}")]
    Config(String),
    #[error(transparent)]
    Topology(#[from] TopologyError),
    #[error(transparent)]
    Channel(#[from] ChannelError),
    #[error(transparent)]
    Slotframe(#[from] SlotframeError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "layout", rename_all = "snake_case", deny_unknown_fields)]
pub enum TopologySpec {
    /// Separate two-level clusters, one root each, out of mutual range.
    Clusters {
        dodags: usize,
        nodes_per_dodag: usize,
        first_ring: usize,
        range: f64,
    },
    /// Explicit symmetric links among nodes `0..nodes`.
    Explicit {
        nodes: usize,
        links: Vec<(u16, u16)>,
        roots: Vec<u16>,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RadioSpec {
    pub hopping_sequence: Vec<u8>,
    pub prr: f64,
    pub interference_multiplier: f64,
}

impl Default for RadioSpec {
    fn default() -> Self {
        Self {
            hopping_sequence: DEFAULT_HOPPING.to_vec(),
            prr: 0.9,
            interference_multiplier: 1.0,
        }
    }
}

/// Static network: DODAGs, channel plan, per-link PRR and interference.
#[derive(Clone, Debug)]
pub struct Network {
    pub nodes: usize,
    pub dodags: Vec<Dodag>,
    pub plan: ChannelPlan,
    pub hopping: Vec<u8>,
    prr: Vec<Vec<f64>>,
    interferes: Vec<Vec<bool>>,
    parent: Vec<Option<NodeId>>,
    dodag_of: Vec<usize>,
}

impl Network {
    pub fn build(topo: &TopologySpec, radio: &RadioSpec) -> Result<Self, SimError> {
        let f = radio.hopping_sequence.len();
        if !(4..=u8::MAX as usize).contains(&f) {
            return Err(SimError::Config(format!(
                "hopping sequence needs at least 4 channels, got {f}"
            )));
        }
        if !(radio.prr > 0.0 && radio.prr <= 1.0) {
            return Err(SimError::Config(format!(
                "prr must lie in (0, 1], got {}",
                radio.prr
            )));
        }
        if radio.interference_multiplier.is_nan() || radio.interference_multiplier < 1.0 {
            return Err(SimError::Config(
                "interference_multiplier must be at least 1".into(),
            ));
        }
        let max_children = f - 3;
        let (nodes, links, roots, positions, range) = match topo {
            TopologySpec::Clusters {
                dodags,
                nodes_per_dodag,
                first_ring,
                range,
            } => {
                if *dodags == 0 || *nodes_per_dodag == 0 || *range <= 0.0 {
                    return Err(SimError::Config(
                        "cluster layout needs positive sizes".into(),
                    ));
                }
                if *first_ring == 0 && *nodes_per_dodag > 1 {
                    return Err(SimError::Config("first_ring must be at least 1".into()));
                }
                let layout = cluster_layout(*dodags, *nodes_per_dodag, *first_ring, *range);
                let links = unit_disk_links(&layout.positions, *range, radio.prr);
                let n = layout.positions.len();
                (n, links, layout.roots, Some(layout.positions), *range)
            }
            TopologySpec::Explicit {
                nodes,
                links,
                roots,
            } => {
                let mut out = Vec::new();
                for &(a, b) in links {
                    if a as usize >= *nodes || b as usize >= *nodes || a == b {
                        return Err(SimError::Config(format!("bad link ({a}, {b})")));
                    }
                    out.push(Link::new(NodeId(a), NodeId(b), radio.prr));
                    out.push(Link::new(NodeId(b), NodeId(a), radio.prr));
                }
                let roots = roots.iter().map(|&r| NodeId(r)).collect();
                (*nodes, out, roots, None, 0.0)
            }
        };
        let dodags = build_forest(nodes, &links, &roots, max_children, RankRule::default())?;
        let mut plan = ChannelPlan::default();
        for d in &dodags {
            plan.merge(&allocate_channels(d, f as u8)?);
        }
        let mut prr = vec![vec![0.0; nodes]; nodes];
        for l in &links {
            prr[l.src.index()][l.dst.index()] = l.prr;
        }
        let interferes = match &positions {
            Some(pos) => interference_from_positions(pos, range * radio.interference_multiplier),
            None => (0..nodes)
                .map(|a| (0..nodes).map(|b| a == b || prr[a][b] > 0.0).collect())
                .collect(),
        };
        Ok(Self::assemble(
            nodes,
            dodags,
            plan,
            radio.hopping_sequence.clone(),
            prr,
            interferes,
        ))
    }

    /// Network over explicit DODAGs. Links exist between parent and child
    /// (with `prr`) and interference follows `extra_adjacent` plus those links.
    pub fn from_dodags(
        nodes: usize,
        dodags: Vec<Dodag>,
        plan: ChannelPlan,
        hopping: Vec<u8>,
        prr: f64,
        extra_adjacent: &[(NodeId, NodeId)],
    ) -> Self {
        let mut p = vec![vec![0.0; nodes]; nodes];
        for d in &dodags {
            for (c, par) in d.parents() {
                p[c.index()][par.index()] = prr;
                p[par.index()][c.index()] = prr;
            }
        }
        let mut inter: Vec<Vec<bool>> = (0..nodes)
            .map(|a| (0..nodes).map(|b| a == b || p[a][b] > 0.0).collect())
            .collect();
        for &(a, b) in extra_adjacent {
            inter[a.index()][b.index()] = true;
            inter[b.index()][a.index()] = true;
        }
        Self::assemble(nodes, dodags, plan, hopping, p, inter)
    }

    fn assemble(
        nodes: usize,
        dodags: Vec<Dodag>,
        plan: ChannelPlan,
        hopping: Vec<u8>,
        prr: Vec<Vec<f64>>,
        interferes: Vec<Vec<bool>>,
    ) -> Self {
        let mut parent = vec![None; nodes];
        let mut dodag_of = vec![0; nodes];
        for (i, d) in dodags.iter().enumerate() {
            for n in d.members() {
                parent[n.index()] = d.parent(n);
                dodag_of[n.index()] = i;
            }
        }
        Self {
            nodes,
            dodags,
            plan,
            hopping,
            prr,
            interferes,
            parent,
            dodag_of,
        }
    }

    pub fn parent(&self, n: NodeId) -> Option<NodeId> {
        self.parent[n.index()]
    }

    pub fn is_root(&self, n: NodeId) -> bool {
        self.parent[n.index()].is_none()
    }

    pub fn dodag_of(&self, n: NodeId) -> &Dodag {
        &self.dodags[self.dodag_of[n.index()]]
    }

    pub fn prr(&self, a: NodeId, b: NodeId) -> f64 {
        self.prr[a.index()][b.index()]
    }

    /// Whether a transmission by `tx` is heard at `rx`.
    pub fn interferes(&self, tx: NodeId, rx: NodeId) -> bool {
        self.interferes[tx.index()][rx.index()]
    }

    pub fn physical_channel(&self, offset: ChannelOffset, asn: u64) -> u8 {
        let f = self.hopping.len() as u64;
        self.hopping[((offset.0 as u64 + asn) % f) as usize]
    }

    pub fn num_channels(&self) -> u8 {
        self.hopping.len() as u8
    }

    pub fn node_ids(&self) -> impl Iterator<Item = NodeId> {
        (0..self.nodes as u16).map(NodeId)
    }
}

fn interference_from_positions(pos: &[Position], range: f64) -> Vec<Vec<bool>> {
    pos.iter()
        .map(|a| pos.iter().map(|b| a.distance(b) <= range).collect())
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub enum Scheduler {
    GtTsch,
    Orchestra(OrchestraConfig),
    /// Static frames, one per node; no 6P updates.
    Fixed(BTreeMap<NodeId, Slotframe>),
}

impl Scheduler {
    pub fn name(&self) -> &'static str {
        match self {
            Scheduler::GtTsch => "gt-tsch",
            Scheduler::Orchestra(_) => "orchestra",
            Scheduler::Fixed(_) => "fixed",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SimParams {
    /// GT-TSCH slotframe length.
    pub m: usize,
    /// Broadcast cells per GT-TSCH slotframe.
    pub k: usize,
    pub rate_ppm: f64,
    pub duration_slots: u64,
    /// Extra slots after generation stops; 0 disables draining.
    pub drain_slots: u64,
    pub update_period: u64,
    pub game: GameParams,
    pub seed: u64,
    pub max_retries: u32,
    pub be_min: u8,
    pub be_max: u8,
    pub delete_hysteresis: u32,
    pub etx_smoothing: f64,
}

impl Default for SimParams {
    fn default() -> Self {
        Self {
            m: 32,
            k: 4,
            rate_ppm: 30.0,
            duration_slots: 40_000,
            drain_slots: 0,
            update_period: 32,
            game: GameParams::default(),
            seed: 1,
            max_retries: 4,
            be_min: 1,
            be_max: 5,
            delete_hysteresis: 1,
            etx_smoothing: 0.5,
        }
    }
}

impl SimParams {
    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: String| Err(SimError::Config(m));
        if self.m < 2 {
            return bad(format!(
                "slotframe length must be at least 2, got {}",
                self.m
            ));
        }
        if self.k == 0 || self.k >= self.m {
            return bad(format!("broadcast cells k={} must lie in [1, m)", self.k));
        }
        if !(self.rate_ppm >= 0.0 && self.rate_ppm.is_finite()) {
            return bad(format!("rate must be non-negative, got {}", self.rate_ppm));
        }
        if self.update_period == 0 {
            return bad("update period must be positive".into());
        }
        if self.be_min > self.be_max || self.be_max > 16 {
            return bad(format!(
                "bad backoff exponents [{}, {}]",
                self.be_min, self.be_max
            ));
        }
        if !(0.0..=1.0).contains(&self.etx_smoothing) {
            return bad("etx smoothing must lie in [0, 1]".into());
        }
        self.game.validate().map_err(SimError::Config)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Packet {
    pub uid: u64,
    pub source: NodeId,
    pub created_asn: u64,
    pub attempts_this_hop: u32,
}

/// Per-node shared-cell backoff exponent.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Backoff {
    pub be: u8,
}

impl Backoff {
    pub fn new(be_min: u8) -> Self {
        Self { be: be_min }
    }

    pub fn transmit_probability(&self) -> f64 {
        0.5f64.powi(self.be as i32)
    }

    pub fn on_failure(&mut self, be_max: u8) {
        self.be = (self.be + 1).min(be_max);
    }

    pub fn on_success(&mut self, be_min: u8) {
        self.be = be_min;
    }
}

/// Which contenders transmit in a shared cell. Each transmits with
/// probability `2^-BE`.
pub fn shared_slot_contention(backoffs: &[Backoff], rng: &mut impl Rng) -> Vec<bool> {
    backoffs
        .iter()
        .map(|b| rng.gen::<f64>() < b.transmit_probability())
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Transmission {
    pub tx: NodeId,
    pub rx: NodeId,
    pub channel: u8,
    /// Receiver listening on this channel in this slot.
    pub listening: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Outcome {
    Ok,
    Collision,
    Lost,
    NoListener,
}

impl Outcome {
    pub fn as_str(self) -> &'static str {
        match self {
            Outcome::Ok => "ok",
            Outcome::Collision => "collision",
            Outcome::Lost => "lost",
            Outcome::NoListener => "nolisten",
        }
    }
}

/// Outcome per transmission: collision when another same-channel
/// transmitter is heard at the receiver, otherwise a Bernoulli(PRR) draw.
pub fn resolve_slot(txs: &[Transmission], net: &Network, rng: &mut impl Rng) -> Vec<Outcome> {
    txs.iter()
        .enumerate()
        .map(|(i, t)| {
            if !t.listening {
                return Outcome::NoListener;
            }
            let hit = txs
                .iter()
                .enumerate()
                .any(|(j, o)| j != i && o.channel == t.channel && net.interferes(o.tx, t.rx));
            if hit {
                return Outcome::Collision;
            }
            if rng.gen::<f64>() < net.prr(t.tx, t.rx) {
                Outcome::Ok
            } else {
                Outcome::Lost
            }
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum TxKind {
    /// Dedicated unicast-data cell (or Orchestra unicast cell).
    Data,
    Shared,
    SixP,
}

impl TxKind {
    pub fn as_str(self) -> &'static str {
        match self {
            TxKind::Data => "tx",
            TxKind::Shared => "tx_shared",
            TxKind::SixP => "tx_6p",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Event {
    Gen {
        asn: u64,
        node: NodeId,
        uid: u64,
    },
    Tx {
        asn: u64,
        kind: TxKind,
        node: NodeId,
        peer: NodeId,
        channel: u8,
        uid: Option<u64>,
        outcome: Outcome,
    },
    Deliver {
        asn: u64,
        root: NodeId,
        source: NodeId,
        uid: u64,
    },
    QueueDrop {
        asn: u64,
        node: NodeId,
        uid: u64,
    },
    RetryDrop {
        asn: u64,
        node: NodeId,
        uid: u64,
    },
    SixP {
        asn: u64,
        kind: SixPKind,
        child: NodeId,
        parent: NodeId,
        requested: u32,
        granted: u32,
    },
    Radio {
        asn: u64,
        node: NodeId,
        on_slots: u64,
    },
    End {
        asn: u64,
        slots: u64,
    },
}

impl fmt::Display for Event {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Event::Gen { asn, node, uid } => write!(f, "{asn},gen,{node},-,-,{uid},ok"),
            Event::Tx {
                asn,
                kind,
                node,
                peer,
                channel,
                uid,
                outcome,
            } => {
                let uid = uid.map_or("-".to_string(), |u| u.to_string());
                write!(
                    f,
                    "{asn},{},{node},{peer},{channel},{uid},{}",
                    kind.as_str(),
                    outcome.as_str()
                )
            }
            Event::Deliver {
                asn,
                root,
                source,
                uid,
            } => write!(f, "{asn},deliver,{root},{source},-,{uid},ok"),
            Event::QueueDrop { asn, node, uid } => write!(f, "{asn},qdrop,{node},-,-,{uid},drop"),
            Event::RetryDrop { asn, node, uid } => write!(f, "{asn},rdrop,{node},-,-,{uid},drop"),
            Event::SixP {
                asn,
                kind,
                child,
                parent,
                requested,
                granted,
            } => write!(f, "{asn},6p,{kind},{child},{parent},{requested},{granted}"),
            Event::Radio {
                asn,
                node,
                on_slots,
            } => write!(f, "{asn},radio,{node},-,-,-,{on_slots}"),
            Event::End { asn, slots } => write!(f, "{asn},end,-,-,-,-,{slots}"),
        }
    }
}

/// Ordered event log of one run.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Trace {
    pub events: Vec<Event>,
}

impl Trace {
    pub fn push(&mut self, e: Event) {
        self.events.push(e);
    }

    /// One CSV line per event.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("asn,event,node,peer,channel,uid,outcome\n");
        for e in &self.events {
            out.push_str(&e.to_string());
            out.push('\n');
        }
        out
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct NodeCounters {
    pub generated: u64,
    pub delivered: u64,
    pub forwarded: u64,
    pub dropped_queue: u64,
    pub dropped_retry: u64,
    pub radio_on_slots: u64,
}

#[derive(Clone, Debug)]
struct TrafficGen {
    interval: f64,
    phase: f64,
    k: u64,
    next: Option<u64>,
    rng: ChaCha8Rng,
}

impl TrafficGen {
    fn new(rate_ppm: f64, seed: u64, node: NodeId) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, node.0 as u64, 0x7472_6166));
        if rate_ppm <= 0.0 {
            return Self {
                interval: 0.0,
                phase: 0.0,
                k: 0,
                next: None,
                rng,
            };
        }
        let interval = SLOTS_PER_MINUTE / rate_ppm;
        let phase = rng.gen::<f64>() * interval;
        let mut g = Self {
            interval,
            phase,
            k: 0,
            next: None,
            rng,
        };
        g.next = Some(g.draw(None));
        g
    }

    fn draw(&mut self, prev: Option<u64>) -> u64 {
        let base = (self.phase + self.k as f64 * self.interval).floor() as i64;
        let jitter: i64 = self.rng.gen_range(-1..=1);
        self.k += 1;
        let t = (base + jitter).max(0) as u64;
        match prev {
            Some(p) => t.max(p + 1),
            None => t,
        }
    }

    fn fire(&mut self, asn: u64) -> bool {
        if self.next == Some(asn) {
            self.next = Some(self.draw(Some(asn)));
            true
        } else {
            false
        }
    }
}

fn mix(a: u64, b: u64, c: u64) -> u64 {
    let mut z = a ^ b.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ c.rotate_left(32);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Clone, Debug)]
struct NodeRt {
    queue: VecDeque<Packet>,
    backoff: Backoff,
    counters: NodeCounters,
    traffic: TrafficGen,
}

/// GT-TSCH per-node control state.
#[derive(Clone, Debug)]
struct GtNode {
    etx: EtxEstimator,
    window: LinkStats,
    q_ewma: f64,
    rank_bar: f64,
    tx_used: BTreeSet<usize>,
    adds_received: u32,
    pending_adds: Vec<(NodeId, u32)>,
    outgoing: Option<SixPRequest>,
    seq: u32,
}

#[derive(Clone, Debug)]
enum Sched {
    Frames {
        frames: Vec<Slotframe>,
        gt: Vec<GtNode>,
        adaptive: bool,
    },
    Orchestra(Vec<OrchestraSchedule>),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Action {
    Off,
    Listen(ChannelOffset),
    Send {
        to: NodeId,
        ch: ChannelOffset,
        kind: TxKind,
        offset: Option<usize>,
    },
}

/// Result of a finished run.
#[derive(Clone, Debug)]
pub struct SimOutput {
    pub trace: Trace,
    pub counters: Vec<NodeCounters>,
    pub resident: u64,
    pub total_slots: u64,
    /// Final per-node frames for frame-based schedulers, the unicast
    /// slotframes for Orchestra.
    pub frames: BTreeMap<NodeId, Slotframe>,
}

impl SimOutput {
    pub fn generated(&self) -> u64 {
        self.counters.iter().map(|c| c.generated).sum()
    }

    pub fn delivered(&self) -> u64 {
        self.counters.iter().map(|c| c.delivered).sum()
    }

    pub fn dropped_queue(&self) -> u64 {
        self.counters.iter().map(|c| c.dropped_queue).sum()
    }

    pub fn dropped_retry(&self) -> u64 {
        self.counters.iter().map(|c| c.dropped_retry).sum()
    }

    /// generated == delivered + dropped_queue + dropped_retry + resident
    pub fn conserved(&self) -> bool {
        self.generated()
            == self.delivered() + self.dropped_queue() + self.dropped_retry() + self.resident
    }
}

pub struct Simulator<'a> {
    net: &'a Network,
    params: SimParams,
    nodes: Vec<NodeRt>,
    sched: Sched,
    medium: ChaCha8Rng,
    asn: u64,
    next_uid: u64,
    trace: Trace,
}

impl<'a> Simulator<'a> {
    pub fn new(
        net: &'a Network,
        scheduler: &Scheduler,
        params: SimParams,
    ) -> Result<Self, SimError> {
        params.validate()?;
        let nodes = net
            .node_ids()
            .map(|n| NodeRt {
                queue: VecDeque::new(),
                backoff: Backoff::new(params.be_min),
                counters: NodeCounters::default(),
                traffic: TrafficGen::new(
                    if net.is_root(n) { 0.0 } else { params.rate_ppm },
                    params.seed,
                    n,
                ),
            })
            .collect();
        let gt_nodes = || -> Result<Vec<GtNode>, SimError> {
            net.node_ids()
                .map(|n| {
                    let rb = if net.is_root(n) {
                        0.0
                    } else {
                        rank_bar(net.dodag_of(n), n)?
                    };
                    Ok(GtNode {
                        etx: EtxEstimator::new(params.etx_smoothing),
                        window: LinkStats::default(),
                        q_ewma: 0.0,
                        rank_bar: rb,
                        tx_used: BTreeSet::new(),
                        adds_received: 0,
                        pending_adds: Vec::new(),
                        outgoing: None,
                        seq: 0,
                    })
                })
                .collect()
        };
        let sched = match scheduler {
            Scheduler::GtTsch => {
                let mut frames = vec![Slotframe::empty(NodeId(0), params.m); net.nodes];
                for d in &net.dodags {
                    for (n, sf) in build_gt_frames(d, &net.plan, params.m, params.k)? {
                        frames[n.index()] = sf;
                    }
                }
                Sched::Frames {
                    frames,
                    gt: gt_nodes()?,
                    adaptive: true,
                }
            }
            Scheduler::Fixed(given) => {
                let m = given
                    .values()
                    .next()
                    .map(Slotframe::len)
                    .ok_or_else(|| SimError::Config("fixed schedule has no frames".into()))?;
                let frames = net
                    .node_ids()
                    .map(|n| {
                        given
                            .get(&n)
                            .cloned()
                            .unwrap_or_else(|| Slotframe::empty(n, m))
                    })
                    .collect();
                Sched::Frames {
                    frames,
                    gt: gt_nodes()?,
                    adaptive: false,
                }
            }
            Scheduler::Orchestra(cfg) => {
                cfg.validate().map_err(SimError::Config)?;
                let mut all = BTreeMap::new();
                for d in &net.dodags {
                    all.extend(build_orchestra_frames(d, *cfg, net.num_channels()));
                }
                Sched::Orchestra(all.into_values().collect())
            }
        };
        Ok(Self {
            net,
            medium: ChaCha8Rng::seed_from_u64(mix(params.seed, 0, 0x6d65_6469)),
            params,
            nodes,
            sched,
            asn: 0,
            next_uid: 0,
            trace: Trace::default(),
        })
    }

    /// Puts `count` packets into `node`'s queue as if generated at slot 0.
    pub fn preload(&mut self, node: NodeId, count: usize) {
        for _ in 0..count {
            self.generate(node);
        }
    }

    pub fn asn(&self) -> u64 {
        self.asn
    }

    pub fn queue_len(&self, node: NodeId) -> usize {
        self.nodes[node.index()].queue.len()
    }

    pub fn counters(&self, node: NodeId) -> NodeCounters {
        self.nodes[node.index()].counters
    }

    pub fn frame(&self, node: NodeId) -> Option<&Slotframe> {
        match &self.sched {
            Sched::Frames { frames, .. } => frames.get(node.index()),
            Sched::Orchestra(_) => None,
        }
    }

    fn generate(&mut self, node: NodeId) {
        let uid = self.next_uid;
        self.next_uid += 1;
        let asn = self.asn;
        self.trace.push(Event::Gen { asn, node, uid });
        let rt = &mut self.nodes[node.index()];
        rt.counters.generated += 1;
        let p = Packet {
            uid,
            source: node,
            created_asn: asn,
            attempts_this_hop: 0,
        };
        self.enqueue(node, p);
    }

    /// Tail-drop enqueue. Returns whether the packet was accepted.
    fn enqueue(&mut self, node: NodeId, p: Packet) -> bool {
        let q_max = self.params.game.q_max as usize;
        let rt = &mut self.nodes[node.index()];
        if rt.queue.len() >= q_max {
            rt.counters.dropped_queue += 1;
            self.trace.push(Event::QueueDrop {
                asn: self.asn,
                node,
                uid: p.uid,
            });
            false
        } else {
            rt.queue.push_back(p);
            true
        }
    }

    fn decide(&mut self, n: NodeId) -> Action {
        let asn = self.asn;
        let has_packet = !self.nodes[n.index()].queue.is_empty();
        let parent = self.net.parent(n);
        match &self.sched {
            Sched::Frames { frames, gt, .. } => {
                let sf = &frames[n.index()];
                let offset = (asn % sf.len() as u64) as usize;
                let cell = sf.cell(offset);
                match cell.kind {
                    SlotType::Sleep => Action::Off,
                    SlotType::Broadcast => Action::Listen(cell.channel),
                    SlotType::Unicast6P { dir: Dir::Rx, .. }
                    | SlotType::UnicastData { dir: Dir::Rx, .. }
                    | SlotType::Shared { dir: Dir::Rx, .. } => Action::Listen(cell.channel),
                    SlotType::Unicast6P { peer, dir: Dir::Tx } => {
                        if gt[n.index()].outgoing.is_some() {
                            Action::Send {
                                to: peer,
                                ch: cell.channel,
                                kind: TxKind::SixP,
                                offset: Some(offset),
                            }
                        } else {
                            Action::Off
                        }
                    }
                    SlotType::UnicastData { peer, dir: Dir::Tx } => {
                        if has_packet {
                            Action::Send {
                                to: peer,
                                ch: cell.channel,
                                kind: TxKind::Data,
                                offset: Some(offset),
                            }
                        } else {
                            Action::Off
                        }
                    }
                    SlotType::Shared {
                        parent: p,
                        dir: Dir::Tx,
                    } => {
                        if has_packet && self.backoff_fires(n) {
                            Action::Send {
                                to: p,
                                ch: cell.channel,
                                kind: TxKind::Shared,
                                offset: None,
                            }
                        } else {
                            Action::Off
                        }
                    }
                }
            }
            Sched::Orchestra(s) => match s[n.index()].action_at(asn) {
                OrchestraAction::EbTx | OrchestraAction::EbRx | OrchestraAction::Broadcast => {
                    Action::Listen(crate::channels::F_BCAST)
                }
                OrchestraAction::Sleep => Action::Off,
                OrchestraAction::Unicast { rx, tx } => {
                    if let (Some(ch), Some(p), true) = (tx, parent, has_packet) {
                        if self.backoff_fires(n) {
                            return Action::Send {
                                to: p,
                                ch,
                                kind: TxKind::Data,
                                offset: None,
                            };
                        }
                    }
                    rx.map_or(Action::Off, Action::Listen)
                }
            },
        }
    }

    fn backoff_fires(&mut self, n: NodeId) -> bool {
        let p = self.nodes[n.index()].backoff.transmit_probability();
        self.medium.gen::<f64>() < p
    }

    /// Advances one slot.
    pub fn step(&mut self) {
        let asn = self.asn;
        let generating = asn < self.params.duration_slots;
        for n in self.net.node_ids() {
            if generating && self.nodes[n.index()].traffic.fire(asn) {
                self.generate(n);
            }
        }

        let actions: Vec<Action> = self.net.node_ids().map(|n| self.decide(n)).collect();
        let mut txs = Vec::new();
        let mut senders = Vec::new();
        for (i, a) in actions.iter().enumerate() {
            if *a != Action::Off {
                self.nodes[i].counters.radio_on_slots += 1;
            }
            if let Action::Send {
                to,
                ch,
                kind,
                offset,
            } = *a
            {
                let listening = actions[to.index()] == Action::Listen(ch);
                txs.push(Transmission {
                    tx: NodeId(i as u16),
                    rx: to,
                    channel: self.net.physical_channel(ch, asn),
                    listening,
                });
                senders.push((kind, offset));
            }
        }
        if !txs.is_empty() {
            let outcomes = resolve_slot(&txs, self.net, &mut self.medium);
            let mut arrivals = Vec::new();
            for ((t, (kind, offset)), outcome) in txs.iter().zip(senders).zip(outcomes) {
                self.finish_tx(*t, kind, offset, outcome, &mut arrivals);
            }
            // received packets become forwardable from the next slot
            self.asn += 1;
            for (rx, p) in arrivals {
                if self.net.is_root(rx) {
                    self.nodes[rx.index()].counters.delivered += 1;
                    self.trace.push(Event::Deliver {
                        asn: self.asn,
                        root: rx,
                        source: p.source,
                        uid: p.uid,
                    });
                } else {
                    self.enqueue(
                        rx,
                        Packet {
                            attempts_this_hop: 0,
                            ..p
                        },
                    );
                }
            }
        } else {
            self.asn += 1;
        }

        if self.asn.is_multiple_of(self.params.update_period) {
            self.period_end();
        }
    }

    fn finish_tx(
        &mut self,
        t: Transmission,
        kind: TxKind,
        offset: Option<usize>,
        outcome: Outcome,
        arrivals: &mut Vec<(NodeId, Packet)>,
    ) {
        let asn = self.asn;
        let n = t.tx;
        if kind == TxKind::SixP {
            self.trace.push(Event::Tx {
                asn,
                kind,
                node: n,
                peer: t.rx,
                channel: t.channel,
                uid: None,
                outcome,
            });
            if outcome == Outcome::Ok {
                self.deliver_six_p(n, t.rx);
            }
            return;
        }
        let be = (self.params.be_min, self.params.be_max);
        let max_attempts = self.params.max_retries + 1;
        let rt = &mut self.nodes[n.index()];
        let head = rt.queue.front_mut().expect("sender has a packet");
        head.attempts_this_hop += 1;
        let uid = head.uid;
        self.trace.push(Event::Tx {
            asn,
            kind,
            node: n,
            peer: t.rx,
            channel: t.channel,
            uid: Some(uid),
            outcome,
        });
        let contended = kind == TxKind::Shared || matches!(self.sched, Sched::Orchestra(_));
        if let Sched::Frames { gt, .. } = &mut self.sched {
            let g = &mut gt[n.index()];
            g.window.attempts += 1;
            if outcome == Outcome::Ok {
                g.window.successes += 1;
            }
            if let Some(o) = offset {
                g.tx_used.insert(o);
            }
        }
        if outcome == Outcome::Ok {
            if contended {
                rt.backoff.on_success(be.0);
            }
            let p = rt.queue.pop_front().unwrap();
            rt.counters.forwarded += 1;
            arrivals.push((t.rx, p));
        } else {
            if contended {
                rt.backoff.on_failure(be.1);
            }
            if head.attempts_this_hop >= max_attempts {
                let p = rt.queue.pop_front().unwrap();
                rt.counters.dropped_retry += 1;
                self.trace.push(Event::RetryDrop {
                    asn,
                    node: n,
                    uid: p.uid,
                });
            }
        }
    }

    fn deliver_six_p(&mut self, child: NodeId, parent: NodeId) {
        let asn = self.asn;
        let Sched::Frames { frames, gt, .. } = &mut self.sched else {
            return;
        };
        let Some(req) = gt[child.index()].outgoing.take() else {
            return;
        };
        match req.kind {
            SixPKind::Add => {
                let pg = &mut gt[parent.index()];
                pg.pending_adds.push((child, req.cell_count));
                pg.adds_received += req.cell_count;
            }
            SixPKind::Delete => {
                let offsets = plan_delete(&frames[child.index()], parent, req.cell_count, false);
                let (pf, cf) = two_mut(frames, parent.index(), child.index());
                commit_delete(pf, cf, &offsets);
                self.trace.push(Event::SixP {
                    asn,
                    kind: SixPKind::Delete,
                    child,
                    parent,
                    requested: req.cell_count,
                    granted: offsets.len() as u32,
                });
            }
        }
    }

    fn period_end(&mut self) {
        let asn = self.asn;
        let net = self.net;
        let params = &self.params;
        let Sched::Frames {
            frames,
            gt,
            adaptive,
        } = &mut self.sched
        else {
            return;
        };
        if !*adaptive {
            return;
        }

        // parents answer this period's ADD requests in one batch
        for p in net.node_ids() {
            let pending = std::mem::take(&mut gt[p.index()].pending_adds);
            if pending.is_empty() {
                continue;
            }
            let grants = {
                let child_frames: BTreeMap<NodeId, &Slotframe> = pending
                    .iter()
                    .map(|&(c, _)| (c, &frames[c.index()]))
                    .collect();
                grant_rx_cells(&frames[p.index()], net.is_root(p), &child_frames, &pending)
            };
            let ch = net.plan.to_children(p).expect("parent has a child channel");
            for (c, g) in grants {
                let (pf, cf) = two_mut(frames, p.index(), c.index());
                commit_grant(pf, cf, &g.offsets, ch);
                self.trace.push(Event::SixP {
                    asn,
                    kind: SixPKind::Add,
                    child: c,
                    parent: p,
                    requested: g.requested,
                    granted: g.granted(),
                });
            }
        }

        let l_g = (params.rate_ppm * params.update_period as f64 / SLOTS_PER_MINUTE).ceil() as u32;
        for n in net.node_ids() {
            let Some(parent) = net.parent(n) else {
                continue;
            };
            let i = n.index();
            let q_now = self.nodes[i].queue.len() as u32;
            let g = &mut gt[i];
            let window = std::mem::take(&mut g.window);
            g.etx.update(window);
            g.q_ewma = ewma_queue(g.q_ewma, q_now, params.game.zeta);
            if g.outgoing.is_some() {
                continue;
            }
            let tx_cells = frames[i].offsets_where(|k| {
                *k == SlotType::UnicastData {
                    peer: parent,
                    dir: Dir::Tx,
                }
            });
            let free = tx_cells.iter().filter(|o| !g.tx_used.contains(o)).count() as u32;
            let l_tx_min = compute_l_tx_min(l_g, g.adds_received, free);
            let kind_count = if l_tx_min > 0 {
                let l_rx_parent = l_rx_available(&frames[parent.index()], net.is_root(parent));
                request_size(
                    l_tx_min,
                    l_rx_parent,
                    g.rank_bar,
                    g.etx.value(),
                    g.q_ewma,
                    &params.game,
                )
                .filter(|&c| c > 0)
                .map(|c| (SixPKind::Add, c))
            } else {
                let d = delete_count(l_tx_min, params.delete_hysteresis).min(tx_cells.len() as u32);
                (d > 0).then_some((SixPKind::Delete, d))
            };
            if let Some((kind, cell_count)) = kind_count {
                g.seq += 1;
                g.outgoing = Some(SixPRequest {
                    kind,
                    src: n,
                    dst: parent,
                    cell_count,
                    seq_num: g.seq,
                });
            }
        }
        for g in gt.iter_mut() {
            g.adds_received = 0;
            g.tx_used.clear();
        }
    }

    pub fn run_to_end(mut self) -> SimOutput {
        let total = self.params.duration_slots + self.params.drain_slots;
        while self.asn < total {
            self.step();
        }
        self.finish()
    }

    pub fn finish(mut self) -> SimOutput {
        let asn = self.asn;
        for n in self.net.node_ids() {
            self.trace.push(Event::Radio {
                asn,
                node: n,
                on_slots: self.nodes[n.index()].counters.radio_on_slots,
            });
        }
        self.trace.push(Event::End { asn, slots: asn });
        let resident = self.nodes.iter().map(|r| r.queue.len() as u64).sum();
        let frames = match &self.sched {
            Sched::Frames { frames, .. } => frames.iter().map(|f| (f.owner(), f.clone())).collect(),
            Sched::Orchestra(s) => s.iter().map(|o| (o.owner, o.unicast_frame())).collect(),
        };
        SimOutput {
            trace: self.trace,
            counters: self.nodes.iter().map(|r| r.counters).collect(),
            resident,
            total_slots: asn,
            frames,
        }
    }
}

fn two_mut<T>(v: &mut [T], a: usize, b: usize) -> (&mut T, &mut T) {
    assert_ne!(a, b);
    if a < b {
        let (l, r) = v.split_at_mut(b);
        (&mut l[a], &mut r[0])
    } else {
        let (l, r) = v.split_at_mut(a);
        (&mut r[0], &mut l[b])
    }
}

/// Runs one scenario to completion.
pub fn run(net: &Network, scheduler: &Scheduler, params: SimParams) -> Result<SimOutput, SimError> {
    Ok(Simulator::new(net, scheduler, params)?.run_to_end())
}
