//! Per-node slotframes built from the five timeslot types.
//!
//! Priority, highest first: Broadcast, Unicast-6P, Unicast-Data, Shared,
//! Sleep. Allocation only ever fills Sleep offsets, so a higher-priority
//! cell is never overwritten.

use std::collections::BTreeMap;
use std::fmt;

use thiserror::Error;

use crate::channels::{ChannelOffset, ChannelPlan};
use crate::topology::{Dodag, NodeId};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SlotframeError {
    #[error("bad slotframe parameters: m={m}, k={k}")]
    BadParams { m: usize, k: usize },
    #[error("slotframe of node {0} is full")]
    SlotframeFull(NodeId),
    #[error("offset {offset} of node {owner} is already {existing}")]
    Occupied {
        owner: NodeId,
        offset: usize,
        existing: SlotType,
    },
    #[error("no channel for node {0} in the channel plan")]
    MissingChannel(NodeId),
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Dir {
    Tx,
    Rx,
}

impl Dir {
    pub fn as_str(self) -> &'static str {
        match self {
            Dir::Tx => "tx",
            Dir::Rx => "rx",
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub enum SlotType {
    #[default]
    Sleep,
    Broadcast,
    Unicast6P {
        peer: NodeId,
        dir: Dir,
    },
    UnicastData {
        peer: NodeId,
        dir: Dir,
    },
    /// Contention cell of the group owned by `parent`. The parent listens
    /// (`Rx`); the children assigned to the cell contend on it (`Tx`).
    Shared {
        parent: NodeId,
        dir: Dir,
    },
}

impl SlotType {
    /// Larger is higher priority.
    pub fn priority(&self) -> u8 {
        match self {
            SlotType::Broadcast => 4,
            SlotType::Unicast6P { .. } => 3,
            SlotType::UnicastData { .. } => 2,
            SlotType::Shared { .. } => 1,
            SlotType::Sleep => 0,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            SlotType::Broadcast => "broadcast",
            SlotType::Unicast6P { .. } => "6p",
            SlotType::UnicastData { .. } => "data",
            SlotType::Shared { .. } => "shared",
            SlotType::Sleep => "sleep",
        }
    }

    pub fn dir(&self) -> Option<Dir> {
        match *self {
            SlotType::Unicast6P { dir, .. }
            | SlotType::UnicastData { dir, .. }
            | SlotType::Shared { dir, .. } => Some(dir),
            _ => None,
        }
    }

    pub fn peer(&self) -> Option<NodeId> {
        match *self {
            SlotType::Unicast6P { peer, .. } | SlotType::UnicastData { peer, .. } => Some(peer),
            SlotType::Shared { parent, .. } => Some(parent),
            _ => None,
        }
    }

    pub fn is_data(&self, dir: Dir) -> bool {
        matches!(self, SlotType::UnicastData { dir: d, .. } if *d == dir)
    }
}

impl fmt::Display for SlotType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match (self.dir(), self.peer()) {
            (Some(d), Some(p)) => write!(f, "{}/{}/{}", self.name(), d.as_str(), p),
            _ => f.write_str(self.name()),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub struct Cell {
    pub kind: SlotType,
    pub channel: ChannelOffset,
}

impl Cell {
    pub fn new(kind: SlotType, channel: ChannelOffset) -> Self {
        Self { kind, channel }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct SlotCounts {
    pub broadcast: usize,
    pub sixp: usize,
    pub data_tx: usize,
    pub data_rx: usize,
    pub shared: usize,
    pub sleep: usize,
}

impl SlotCounts {
    pub fn total(&self) -> usize {
        self.broadcast + self.sixp + self.data_tx + self.data_rx + self.shared + self.sleep
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Slotframe {
    owner: NodeId,
    cells: Vec<Cell>,
}

impl Slotframe {
    /// All-Sleep frame of length `m`.
    pub fn empty(owner: NodeId, m: usize) -> Self {
        Self {
            owner,
            cells: vec![Cell::default(); m],
        }
    }

    pub fn owner(&self) -> NodeId {
        self.owner
    }

    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    pub fn cell(&self, offset: usize) -> Cell {
        self.cells[offset]
    }

    pub fn cells(&self) -> &[Cell] {
        &self.cells
    }

    pub fn is_free(&self, offset: usize) -> bool {
        self.cells[offset].kind == SlotType::Sleep
    }

    /// Fills a Sleep offset. Never overwrites.
    pub fn place(&mut self, offset: usize, cell: Cell) -> Result<(), SlotframeError> {
        let existing = self.cells[offset].kind;
        if existing != SlotType::Sleep {
            return Err(SlotframeError::Occupied {
                owner: self.owner,
                offset,
                existing,
            });
        }
        self.cells[offset] = cell;
        Ok(())
    }

    /// Returns the offset to Sleep and yields what was there.
    pub fn clear(&mut self, offset: usize) -> Cell {
        std::mem::take(&mut self.cells[offset])
    }

    /// The cell active at absolute slot number `asn`.
    pub fn action_at(&self, asn: u64) -> Cell {
        self.cells[(asn % self.cells.len() as u64) as usize]
    }

    pub fn offsets_where(&self, pred: impl Fn(&SlotType) -> bool) -> Vec<usize> {
        self.cells
            .iter()
            .enumerate()
            .filter(|(_, c)| pred(&c.kind))
            .map(|(i, _)| i)
            .collect()
    }

    pub fn data_offsets(&self, dir: Dir) -> Vec<usize> {
        self.offsets_where(|k| k.is_data(dir))
    }

    pub fn counts(&self) -> SlotCounts {
        let mut c = SlotCounts::default();
        for cell in &self.cells {
            match cell.kind {
                SlotType::Sleep => c.sleep += 1,
                SlotType::Broadcast => c.broadcast += 1,
                SlotType::Unicast6P { .. } => c.sixp += 1,
                SlotType::UnicastData { dir: Dir::Tx, .. } => c.data_tx += 1,
                SlotType::UnicastData { dir: Dir::Rx, .. } => c.data_rx += 1,
                SlotType::Shared { .. } => c.shared += 1,
            }
        }
        c
    }

    /// `offset,type,dir,peer,channel` per offset.
    pub fn dump(&self) -> String {
        let mut out = String::new();
        for (i, c) in self.cells.iter().enumerate() {
            let dir = c.kind.dir().map_or("-", Dir::as_str);
            let peer = c.kind.peer().map_or("-".to_string(), |p| p.to_string());
            out.push_str(&format!(
                "{i},{},{dir},{peer},{}\n",
                c.kind.name(),
                c.channel
            ));
        }
        out
    }
}

/// Broadcast offsets: the first `k` of `{x < m : x mod floor(m/k) == 0}`.
pub fn broadcast_offsets(m: usize, k: usize) -> Result<Vec<usize>, SlotframeError> {
    if k == 0 || k >= m {
        return Err(SlotframeError::BadParams { m, k });
    }
    let step = m / k;
    Ok((0..m).step_by(step).take(k).collect())
}

/// Slotframe of length `m` holding `k` broadcast cells on `f_bcast`.
pub fn init_slotframe(owner: NodeId, m: usize, k: usize) -> Result<Slotframe, SlotframeError> {
    let mut sf = Slotframe::empty(owner, m);
    for x in broadcast_offsets(m, k)? {
        sf.cells[x] = Cell::new(SlotType::Broadcast, crate::channels::F_BCAST);
    }
    Ok(sf)
}

/// Unicast-6P cells per adjacent link for a frame of length `m`.
pub fn per_link_6p(m: usize) -> usize {
    ((m as f64 / 16.0).round() as usize).max(1)
}

/// Shared cells each parent keeps for its children.
pub fn shared_cell_count(max_children: usize) -> usize {
    max_children.div_ceil(2)
}

/// Lowest `count` offsets free in every frame of `owners`.
fn common_free(
    frames: &BTreeMap<NodeId, Slotframe>,
    owners: &[NodeId],
    count: usize,
) -> Result<Vec<usize>, SlotframeError> {
    let m = frames[&owners[0]].len();
    let free: Vec<usize> = (0..m)
        .filter(|&x| owners.iter().all(|o| frames[o].is_free(x)))
        .take(count)
        .collect();
    if free.len() < count {
        return Err(SlotframeError::SlotframeFull(owners[0]));
    }
    Ok(free)
}

fn child_channel(plan: &ChannelPlan, parent: NodeId) -> Result<ChannelOffset, SlotframeError> {
    plan.to_children(parent)
        .ok_or(SlotframeError::MissingChannel(parent))
}

/// `per_link` Unicast-6P cells for every parent/child link of `d`, at the
/// lowest offsets free in both frames.
pub fn allocate_6p_slots(
    frames: &mut BTreeMap<NodeId, Slotframe>,
    d: &Dodag,
    plan: &ChannelPlan,
    per_link: usize,
) -> Result<(), SlotframeError> {
    for p in d.bfs_order() {
        for &c in d.children(p) {
            let ch = child_channel(plan, p)?;
            for x in common_free(frames, &[p, c], per_link)? {
                let rx = Cell::new(
                    SlotType::Unicast6P {
                        peer: c,
                        dir: Dir::Rx,
                    },
                    ch,
                );
                let tx = Cell::new(
                    SlotType::Unicast6P {
                        peer: p,
                        dir: Dir::Tx,
                    },
                    ch,
                );
                frames.get_mut(&p).unwrap().place(x, rx)?;
                frames.get_mut(&c).unwrap().place(x, tx)?;
            }
        }
    }
    Ok(())
}

/// `ceil(max_children / 2)` Shared cells per parent. Children are dealt to
/// the cells in pairs, in child order, so each cell is contended by at most
/// two children.
pub fn allocate_shared_slots(
    frames: &mut BTreeMap<NodeId, Slotframe>,
    d: &Dodag,
    plan: &ChannelPlan,
    max_children: usize,
) -> Result<(), SlotframeError> {
    let count = shared_cell_count(max_children);
    for p in d.bfs_order() {
        let kids = d.children(p);
        if kids.is_empty() {
            continue;
        }
        let ch = child_channel(plan, p)?;
        let mut owners = vec![p];
        owners.extend_from_slice(kids);
        let offsets = common_free(frames, &owners, count)?;
        for &x in &offsets {
            let rx = Cell::new(
                SlotType::Shared {
                    parent: p,
                    dir: Dir::Rx,
                },
                ch,
            );
            frames.get_mut(&p).unwrap().place(x, rx)?;
        }
        for (i, &c) in kids.iter().enumerate() {
            let x = offsets[(i / 2) % count];
            let tx = Cell::new(
                SlotType::Shared {
                    parent: p,
                    dir: Dir::Tx,
                },
                ch,
            );
            frames.get_mut(&c).unwrap().place(x, tx)?;
        }
    }
    Ok(())
}

/// Initial GT-TSCH frames for one DODAG: broadcast, 6P and shared cells.
/// Unicast-Data cells are granted at runtime.
pub fn build_gt_frames(
    d: &Dodag,
    plan: &ChannelPlan,
    m: usize,
    k: usize,
) -> Result<BTreeMap<NodeId, Slotframe>, SlotframeError> {
    let mut frames = BTreeMap::new();
    for n in d.members() {
        frames.insert(n, init_slotframe(n, m, k)?);
    }
    allocate_6p_slots(&mut frames, d, plan, per_link_6p(m))?;
    allocate_shared_slots(&mut frames, d, plan, d.max_children())?;
    Ok(frames)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FrameViolationKind {
    /// Non-root frame with data Rx cells has no more Tx than Rx.
    TxNotAboveRx,
    /// Two cyclically consecutive data Rx cells with no Tx between them.
    RxNotInterleaved,
    BroadcastChannel,
    /// A parent Rx cell without the matching child Tx cell, or vice versa.
    PairMismatch,
}

impl fmt::Display for FrameViolationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            FrameViolationKind::TxNotAboveRx => "TxNotAboveRx",
            FrameViolationKind::RxNotInterleaved => "RxNotInterleaved",
            FrameViolationKind::BroadcastChannel => "BroadcastChannel",
            FrameViolationKind::PairMismatch => "PairMismatch",
        };
        f.write_str(s)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FrameViolation {
    pub kind: FrameViolationKind,
    pub owner: NodeId,
    pub offset: Option<usize>,
}

impl fmt::Display for FrameViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.offset {
            Some(o) => write!(f, "{} in frame {} at offset {}", self.kind, self.owner, o),
            None => write!(f, "{} in frame {}", self.kind, self.owner),
        }
    }
}

/// True when, walking the data cells cyclically, no two Rx cells are adjacent.
pub fn rx_interleaved(sf: &Slotframe) -> bool {
    first_adjacent_rx(sf).is_none()
}

fn first_adjacent_rx(sf: &Slotframe) -> Option<usize> {
    let data: Vec<(usize, Dir)> = sf
        .cells
        .iter()
        .enumerate()
        .filter_map(|(i, c)| match c.kind {
            SlotType::UnicastData { dir, .. } => Some((i, dir)),
            _ => None,
        })
        .collect();
    let n = data.len();
    if n == 0 {
        return None;
    }
    // a lone Rx wraps onto itself with nothing between
    for i in 0..n {
        let (off, dir) = data[i];
        let next = data[(i + 1) % n].1;
        if dir == Dir::Rx && next == Dir::Rx {
            return Some(off);
        }
    }
    None
}

/// Single-frame rules. The root sinks traffic and is exempt from the Tx/Rx
/// rules.
pub fn lint_frame(sf: &Slotframe, is_root: bool, f_bcast: ChannelOffset) -> Vec<FrameViolation> {
    let mut out = Vec::new();
    let v = |kind, offset| FrameViolation {
        kind,
        owner: sf.owner,
        offset,
    };
    for (i, c) in sf.cells.iter().enumerate() {
        if c.kind == SlotType::Broadcast && c.channel != f_bcast {
            out.push(v(FrameViolationKind::BroadcastChannel, Some(i)));
        }
    }
    if !is_root {
        let counts = sf.counts();
        if counts.data_rx > 0 && counts.data_tx <= counts.data_rx {
            out.push(v(FrameViolationKind::TxNotAboveRx, None));
        }
        if let Some(off) = first_adjacent_rx(sf) {
            out.push(v(FrameViolationKind::RxNotInterleaved, Some(off)));
        }
    }
    out
}

/// Every dedicated parent/child cell (6P and data) must appear in both
/// frames at the same offset, with mirrored direction and the same channel.
pub fn lint_pairs(frames: &BTreeMap<NodeId, Slotframe>) -> Vec<FrameViolation> {
    let mut out = Vec::new();
    for (&owner, sf) in frames {
        for (i, c) in sf.cells.iter().enumerate() {
            let (peer, dir, data) = match c.kind {
                SlotType::UnicastData { peer, dir } => (peer, dir, true),
                SlotType::Unicast6P { peer, dir } => (peer, dir, false),
                _ => continue,
            };
            let want_dir = match dir {
                Dir::Tx => Dir::Rx,
                Dir::Rx => Dir::Tx,
            };
            let want = if data {
                SlotType::UnicastData {
                    peer: owner,
                    dir: want_dir,
                }
            } else {
                SlotType::Unicast6P {
                    peer: owner,
                    dir: want_dir,
                }
            };
            let ok = frames
                .get(&peer)
                .and_then(|p| p.cells.get(i))
                .is_some_and(|pc| pc.kind == want && pc.channel == c.channel);
            if !ok {
                out.push(FrameViolation {
                    kind: FrameViolationKind::PairMismatch,
                    owner,
                    offset: Some(i),
                });
            }
        }
    }
    out
}

/// Several frames, each introduced by a `frame,<owner>,<m>` line.
pub fn dump_frames<'a>(frames: impl IntoIterator<Item = &'a Slotframe>) -> String {
    let mut out = String::new();
    for sf in frames {
        out.push_str(&format!("frame,{},{}\n", sf.owner, sf.len()));
        out.push_str(&sf.dump());
    }
    out
}

pub fn parse_frames(text: &str) -> Result<BTreeMap<NodeId, Slotframe>, SlotframeError> {
    let err = |line: usize, msg: String| SlotframeError::Parse { line, msg };
    let mut frames = BTreeMap::new();
    let mut current: Option<Slotframe> = None;
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let s = raw.trim();
        if s.is_empty() || s.starts_with('#') {
            continue;
        }
        let cols: Vec<&str> = s.split(',').map(str::trim).collect();
        let num = |i: usize, what: &str| -> Result<usize, SlotframeError> {
            cols.get(i)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| err(line, format!("bad {what}")))
        };
        if cols[0] == "frame" {
            if let Some(sf) = current.take() {
                frames.insert(sf.owner, sf);
            }
            let owner = NodeId(num(1, "frame owner")? as u16);
            let m = num(2, "frame length")?;
            if m == 0 {
                return Err(err(line, "frame length must be positive".into()));
            }
            current = Some(Slotframe::empty(owner, m));
            continue;
        }
        let sf = current
            .as_mut()
            .ok_or_else(|| err(line, "cell row before any `frame` header".into()))?;
        if cols.len() != 5 {
            return Err(err(line, format!("expected 5 columns, got {}", cols.len())));
        }
        let offset = num(0, "offset")?;
        if offset >= sf.len() {
            return Err(err(
                line,
                format!("offset {offset} outside frame of {}", sf.len()),
            ));
        }
        let channel = ChannelOffset(num(4, "channel")? as u8);
        let dir = match cols[2] {
            "tx" => Some(Dir::Tx),
            "rx" => Some(Dir::Rx),
            "-" => None,
            other => return Err(err(line, format!("bad direction `{other}`"))),
        };
        let peer = match cols[3] {
            "-" => None,
            p => Some(NodeId(
                p.parse()
                    .map_err(|_| err(line, format!("bad peer `{p}`")))?,
            )),
        };
        let need = |what: &str| err(line, format!("`{}` cell needs {what}", cols[1]));
        let kind = match cols[1] {
            "sleep" => SlotType::Sleep,
            "broadcast" => SlotType::Broadcast,
            "6p" => SlotType::Unicast6P {
                peer: peer.ok_or_else(|| need("a peer"))?,
                dir: dir.ok_or_else(|| need("a direction"))?,
            },
            "data" => SlotType::UnicastData {
                peer: peer.ok_or_else(|| need("a peer"))?,
                dir: dir.ok_or_else(|| need("a direction"))?,
            },
            "shared" => SlotType::Shared {
                parent: peer.ok_or_else(|| need("a peer"))?,
                dir: dir.ok_or_else(|| need("a direction"))?,
            },
            other => return Err(err(line, format!("unknown slot type `{other}`"))),
        };
        sf.cells[offset] = Cell::new(kind, channel);
    }
    if let Some(sf) = current.take() {
        frames.insert(sf.owner, sf);
    }
    if frames.is_empty() {
        return Err(err(0, "no frames".into()));
    }
    Ok(frames)
}
