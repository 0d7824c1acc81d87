//! Scenario files and parameter sweeps.
//!
//! A scenario file is TOML with the sections `[scenario]`, `[topology]`,
//! `[radio]`, `[schedule]`, `[traffic]`, `[game]` and `[run]`. Unknown keys
//! are rejected. Sweep axes (`traffic.rate_ppm`, `topology.nodes_per_dodag`,
//! `schedule.orchestra_unicast_len`) take a single value or a list; the sweep
//! is their cartesian product, crossed with the schedulers and the seeds.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::baseline::OrchestraConfig;
use crate::game::GameParams;
use crate::metrics::{aggregate, summarize, MetricsRow, RunMetrics, Summary};
use crate::sim::{
    run, Network, RadioSpec, Scheduler, SimError, SimOutput, SimParams, TopologySpec,
    DEFAULT_HOPPING,
};
use crate::slotframe::dump_frames;
use crate::SLOTS_PER_MINUTE;

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("parse error: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid scenario: {0}")]
    Config(String),
    #[error("run {scenario_id}/{scheduler}/seed {seed}: {source}")]
    Run {
        scenario_id: String,
        scheduler: String,
        seed: u64,
        source: SimError,
    },
    #[error("thread pool: {0}")]
    Pool(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum OneOrMany<T> {
    One(T),
    Many(Vec<T>),
}

impl<T: Clone> OneOrMany<T> {
    pub fn values(&self) -> Vec<T> {
        match self {
            OneOrMany::One(v) => vec![v.clone()],
            OneOrMany::Many(v) => v.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioSection {
    pub name: String,
    #[serde(default)]
    pub description: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "layout", rename_all = "snake_case", deny_unknown_fields)]
pub enum TopologySection {
    Clusters {
        #[serde(default = "default_dodags")]
        dodags: usize,
        nodes_per_dodag: OneOrMany<usize>,
        #[serde(default = "default_first_ring")]
        first_ring: usize,
        #[serde(default = "default_range")]
        range: f64,
    },
    Explicit {
        nodes: usize,
        links: Vec<(u16, u16)>,
        roots: Vec<u16>,
    },
}

fn default_dodags() -> usize {
    2
}

fn default_first_ring() -> usize {
    3
}

fn default_range() -> f64 {
    10.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RadioSection {
    pub hopping_sequence: Vec<u8>,
    /// Uses the first `num_channels` entries of the hopping sequence.
    pub num_channels: Option<usize>,
    pub prr: f64,
    pub interference_multiplier: f64,
}

impl Default for RadioSection {
    fn default() -> Self {
        Self {
            hopping_sequence: DEFAULT_HOPPING.to_vec(),
            num_channels: None,
            prr: 0.9,
            interference_multiplier: 1.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum SchedulerKind {
    #[serde(rename = "gt-tsch")]
    GtTsch,
    #[serde(rename = "orchestra")]
    Orchestra,
}

impl SchedulerKind {
    pub fn name(self) -> &'static str {
        match self {
            SchedulerKind::GtTsch => "gt-tsch",
            SchedulerKind::Orchestra => "orchestra",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleSection {
    pub schedulers: Vec<SchedulerKind>,
    /// GT-TSCH slotframe length.
    pub slotframe_len: usize,
    pub broadcast_cells: usize,
    pub orchestra_unicast_len: OneOrMany<usize>,
    pub orchestra_broadcast_len: usize,
    pub orchestra_eb_len: usize,
    /// When set, the GT-TSCH slotframe is this multiple of the Orchestra
    /// unicast length instead of `slotframe_len`.
    pub gt_frame_factor: Option<usize>,
}

impl Default for ScheduleSection {
    fn default() -> Self {
        let o = OrchestraConfig::default();
        Self {
            schedulers: vec![SchedulerKind::GtTsch, SchedulerKind::Orchestra],
            slotframe_len: 32,
            broadcast_cells: 4,
            orchestra_unicast_len: OneOrMany::One(o.unicast_slotframe_len),
            orchestra_broadcast_len: o.broadcast_slotframe_len,
            orchestra_eb_len: o.eb_slotframe_len,
            gt_frame_factor: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrafficSection {
    pub rate_ppm: OneOrMany<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunSection {
    pub duration_min: f64,
    pub seeds: u32,
    pub seed: u64,
    /// Slots between demand updates; defaults to one GT-TSCH slotframe.
    pub update_period: Option<u64>,
    pub drain_min: f64,
    pub max_retries: u32,
    pub be_min: u8,
    pub be_max: u8,
}

impl Default for RunSection {
    fn default() -> Self {
        Self {
            duration_min: 10.0,
            seeds: 5,
            seed: 1,
            update_period: None,
            drain_min: 0.0,
            max_retries: 4,
            be_min: 1,
            be_max: 5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioFile {
    pub scenario: ScenarioSection,
    pub topology: TopologySection,
    #[serde(default)]
    pub radio: RadioSection,
    #[serde(default)]
    pub schedule: ScheduleSection,
    pub traffic: TrafficSection,
    #[serde(default)]
    pub game: GameParams,
    #[serde(default)]
    pub run: RunSection,
}

impl ScenarioFile {
    pub fn parse(text: &str) -> Result<Self, ExperimentError> {
        Ok(toml::from_str(text)?)
    }
}

pub const BUILTIN_PROFILES: [(&str, &str); 3] = [
    (
        "traffic_sweep",
        include_str!("../../../profiles/traffic_sweep.toml"),
    ),
    (
        "dodag_size_sweep",
        include_str!("../../../profiles/dodag_size_sweep.toml"),
    ),
    (
        "slotframe_sweep",
        include_str!("../../../profiles/slotframe_sweep.toml"),
    ),
];

pub fn builtin_profile(name: &str) -> Option<&'static str> {
    BUILTIN_PROFILES
        .iter()
        .find(|(n, _)| *n == name)
        .map(|(_, t)| *t)
}

/// Command-line adjustments applied on top of a scenario file.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Overrides {
    pub seeds: Option<u32>,
    pub seed: Option<u64>,
    pub duration_min: Option<f64>,
}

/// One fully resolved run.
#[derive(Clone, Debug, PartialEq)]
pub struct RunSpec {
    pub scenario_id: String,
    pub scheduler: SchedulerKind,
    pub rate_ppm: f64,
    pub dodag_size: usize,
    /// GT-TSCH frame length, or the Orchestra unicast length.
    pub slotframe_len: usize,
    pub topology: TopologySpec,
    pub radio: RadioSpec,
    pub params: SimParams,
    pub orchestra: OrchestraConfig,
}

impl RunSpec {
    pub fn scheduler(&self) -> Scheduler {
        match self.scheduler {
            SchedulerKind::GtTsch => Scheduler::GtTsch,
            SchedulerKind::Orchestra => Scheduler::Orchestra(self.orchestra),
        }
    }
}

fn config(msg: impl Into<String>) -> ExperimentError {
    ExperimentError::Config(msg.into())
}

/// Expands the sweep into runs ordered by point, then scheduler, then seed.
pub fn expand(file: &ScenarioFile, ov: &Overrides) -> Result<Vec<RunSpec>, ExperimentError> {
    let name = &file.scenario.name;
    if name.is_empty() || name.contains(['/', ',', ' ']) {
        return Err(config(format!(
            "scenario.name `{name}` must be non-empty without '/', ',' or spaces"
        )));
    }
    let seeds = ov.seeds.unwrap_or(file.run.seeds);
    if seeds == 0 {
        return Err(config("run.seeds must be at least 1"));
    }
    let base_seed = ov.seed.unwrap_or(file.run.seed);
    let duration_min = ov.duration_min.unwrap_or(file.run.duration_min);
    if !(duration_min > 0.0 && duration_min.is_finite()) {
        return Err(config("run.duration_min must be positive"));
    }
    if file.run.drain_min.is_nan() || file.run.drain_min < 0.0 {
        return Err(config("run.drain_min must be non-negative"));
    }

    let radio = &file.radio;
    let mut hopping = radio.hopping_sequence.clone();
    if let Some(n) = radio.num_channels {
        if n > hopping.len() {
            return Err(config(format!(
                "radio.num_channels = {n} exceeds the hopping sequence length {}",
                hopping.len()
            )));
        }
        hopping.truncate(n);
    }
    let radio_spec = RadioSpec {
        hopping_sequence: hopping,
        prr: radio.prr,
        interference_multiplier: radio.interference_multiplier,
    };

    let sched = &file.schedule;
    if sched.schedulers.is_empty() {
        return Err(config(
            "schedule.schedulers must list at least one scheduler",
        ));
    }
    let rates = file.traffic.rate_ppm.values();
    let sizes: Vec<Option<usize>> = match &file.topology {
        TopologySection::Clusters {
            nodes_per_dodag, ..
        } => nodes_per_dodag.values().into_iter().map(Some).collect(),
        TopologySection::Explicit { .. } => vec![None],
    };
    let unicast = sched.orchestra_unicast_len.values();
    if rates.is_empty() || sizes.is_empty() || unicast.is_empty() {
        return Err(config("sweep axes must not be empty lists"));
    }

    let duration_slots = (duration_min * SLOTS_PER_MINUTE).round() as u64;
    let drain_slots = (file.run.drain_min * SLOTS_PER_MINUTE).round() as u64;
    let mut out = Vec::new();
    let mut point = 0usize;
    for &size in &sizes {
        for &u in &unicast {
            for &rate in &rates {
                let (topology, dodag_size) = match (&file.topology, size) {
                    (
                        TopologySection::Clusters {
                            dodags,
                            first_ring,
                            range,
                            ..
                        },
                        Some(n),
                    ) => (
                        TopologySpec::Clusters {
                            dodags: *dodags,
                            nodes_per_dodag: n,
                            first_ring: *first_ring,
                            range: *range,
                        },
                        n,
                    ),
                    (
                        TopologySection::Explicit {
                            nodes,
                            links,
                            roots,
                        },
                        _,
                    ) => (
                        TopologySpec::Explicit {
                            nodes: *nodes,
                            links: links.clone(),
                            roots: roots.clone(),
                        },
                        nodes / roots.len().max(1),
                    ),
                    _ => unreachable!(),
                };
                let m = sched.gt_frame_factor.map_or(sched.slotframe_len, |f| f * u);
                let orchestra = OrchestraConfig {
                    unicast_slotframe_len: u,
                    broadcast_slotframe_len: sched.orchestra_broadcast_len,
                    eb_slotframe_len: sched.orchestra_eb_len,
                };
                orchestra.validate().map_err(config)?;
                let scenario_id = format!("{name}-{point}");
                for &kind in &sched.schedulers {
                    for i in 0..seeds {
                        let params = SimParams {
                            m,
                            k: sched.broadcast_cells,
                            rate_ppm: rate,
                            duration_slots,
                            drain_slots,
                            update_period: file.run.update_period.unwrap_or(m as u64),
                            game: file.game,
                            seed: base_seed + i as u64,
                            max_retries: file.run.max_retries,
                            be_min: file.run.be_min,
                            be_max: file.run.be_max,
                            ..SimParams::default()
                        };
                        params.validate().map_err(|e| config(e.to_string()))?;
                        out.push(RunSpec {
                            scenario_id: scenario_id.clone(),
                            scheduler: kind,
                            rate_ppm: rate,
                            dodag_size,
                            slotframe_len: match kind {
                                SchedulerKind::GtTsch => m,
                                SchedulerKind::Orchestra => u,
                            },
                            topology: topology.clone(),
                            radio: radio_spec.clone(),
                            params,
                            orchestra,
                        });
                    }
                }
                point += 1;
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct RunResult {
    pub spec: RunSpec,
    pub metrics: RunMetrics,
    pub row: MetricsRow,
    pub conserved: bool,
    /// Trace CSV, when requested.
    pub trace_csv: Option<String>,
    /// Final frames and channel plan, when requested.
    pub dumps: Option<(String, String)>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Keep {
    pub trace: bool,
    pub dumps: bool,
}

pub fn execute(spec: &RunSpec, keep: Keep) -> Result<RunResult, ExperimentError> {
    let wrap = |source: SimError| ExperimentError::Run {
        scenario_id: spec.scenario_id.clone(),
        scheduler: spec.scheduler.name().to_string(),
        seed: spec.params.seed,
        source,
    };
    let net = Network::build(&spec.topology, &spec.radio).map_err(wrap)?;
    let out: SimOutput = run(&net, &spec.scheduler(), spec.params.clone()).map_err(wrap)?;
    let metrics = aggregate(&out.trace).expect("finished runs end with an end marker");
    let row = MetricsRow {
        scenario_id: spec.scenario_id.clone(),
        scheduler: spec.scheduler.name().to_string(),
        seed: spec.params.seed,
        rate_ppm: spec.rate_ppm,
        dodag_size: spec.dodag_size,
        slotframe_len: spec.slotframe_len,
        pdr: metrics.pdr,
        delay_ms: metrics.mean_e2e_delay_ms,
        lost_ppm: metrics.lost_ppm,
        duty_cycle: metrics.duty_cycle,
        queue_loss: metrics.queue_loss_total,
        received: metrics.received_total,
    };
    let dumps = keep.dumps.then(|| {
        let parents = net
            .dodags
            .iter()
            .flat_map(|d| d.parents().iter().map(|(c, p)| (*c, *p)))
            .collect::<BTreeMap<_, _>>();
        (
            dump_frames(out.frames.values()),
            net.plan.to_table(&parents),
        )
    });
    Ok(RunResult {
        spec: spec.clone(),
        metrics,
        row,
        conserved: out.conserved(),
        trace_csv: keep.trace.then(|| out.trace.to_csv()),
        dumps,
    })
}

/// Runs every spec, in parallel over `workers` threads (all cores when
/// `None`). Results keep the order of `specs`.
pub fn run_all(
    specs: &[RunSpec],
    workers: Option<usize>,
    keep: Keep,
) -> Result<Vec<RunResult>, ExperimentError> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.unwrap_or(0))
        .build()
        .map_err(|e| ExperimentError::Pool(e.to_string()))?;
    pool.install(|| specs.par_iter().map(|s| execute(s, keep)).collect())
}

/// Cross-seed summary of one (point, scheduler) group.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SummaryRow {
    pub scenario_id: String,
    pub scheduler: String,
    pub rate_ppm: f64,
    pub dodag_size: usize,
    pub slotframe_len: usize,
    pub summary: Summary,
}

pub const SUMMARY_HEADER: &str = "scenario_id,scheduler,rate_ppm,dodag_size,slotframe_len,runs,pdr_mean,pdr_std,delay_ms_mean,delay_ms_std,lost_ppm_mean,lost_ppm_std,throughput_ppm_mean,throughput_ppm_std,duty_cycle_mean,duty_cycle_std,queue_loss_mean,queue_loss_std";

impl SummaryRow {
    pub fn to_csv(&self) -> String {
        let s = &self.summary;
        format!(
            "{},{},{},{},{},{},{:.6},{:.6},{:.3},{:.3},{:.3},{:.3},{:.3},{:.3},{:.6},{:.6},{:.3},{:.3}",
            self.scenario_id,
            self.scheduler,
            self.rate_ppm,
            self.dodag_size,
            self.slotframe_len,
            s.runs,
            s.pdr.mean,
            s.pdr.std,
            s.delay_ms.mean,
            s.delay_ms.std,
            s.lost_ppm.mean,
            s.lost_ppm.std,
            s.throughput_ppm.mean,
            s.throughput_ppm.std,
            s.duty_cycle.mean,
            s.duty_cycle.std,
            s.queue_loss.mean,
            s.queue_loss.std
        )
    }
}

/// Groups results by (scenario id, scheduler) in first-seen order.
pub fn summary_rows(results: &[RunResult]) -> Vec<SummaryRow> {
    let mut order: Vec<(String, SchedulerKind)> = Vec::new();
    let mut groups: BTreeMap<(String, SchedulerKind), Vec<&RunResult>> = BTreeMap::new();
    for r in results {
        let key = (r.spec.scenario_id.clone(), r.spec.scheduler);
        if !groups.contains_key(&key) {
            order.push(key.clone());
        }
        groups.entry(key).or_default().push(r);
    }
    order
        .into_iter()
        .map(|key| {
            let rs = &groups[&key];
            let first = &rs[0].spec;
            let metrics: Vec<RunMetrics> = rs.iter().map(|r| r.metrics).collect();
            SummaryRow {
                scenario_id: key.0.clone(),
                scheduler: key.1.name().to_string(),
                rate_ppm: first.rate_ppm,
                dodag_size: first.dodag_size,
                slotframe_len: first.slotframe_len,
                summary: summarize(&metrics).expect("groups are non-empty"),
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    const SMALL: &str = r#"
[scenario]
name = "small"

[topology]
layout = "clusters"
dodags = 1
nodes_per_dodag = [4, 5]

[traffic]
rate_ppm = [30, 60.5]

[run]
duration_min = 0.5
seeds = 2
"#;

    #[test]
    fn builtin_profiles_parse() {
        for (name, text) in BUILTIN_PROFILES {
            let f = ScenarioFile::parse(text).unwrap();
            assert_eq!(f.scenario.name, name);
            assert!(!expand(&f, &Overrides::default()).unwrap().is_empty());
        }
    }

    #[test]
    fn traffic_profile_shape() {
        let f = ScenarioFile::parse(builtin_profile("traffic_sweep").unwrap()).unwrap();
        let runs = expand(
            &f,
            &Overrides {
                seeds: Some(1),
                ..Overrides::default()
            },
        )
        .unwrap();
        assert_eq!(runs.len(), 6 * 2);
        let rates: Vec<f64> = runs.iter().map(|r| r.rate_ppm).collect();
        assert_eq!(rates[0], 30.0);
        assert_eq!(*rates.last().unwrap(), 165.0);
        assert_eq!(runs[0].params.m, 32);
        assert_eq!(runs[0].radio.hopping_sequence, DEFAULT_HOPPING.to_vec());
        assert_eq!(runs[0].params.duration_slots, 40_000);
    }

    #[test]
    fn slotframe_profile_scales_gt_frame() {
        let f = ScenarioFile::parse(builtin_profile("slotframe_sweep").unwrap()).unwrap();
        for r in expand(&f, &Overrides::default()).unwrap() {
            assert_eq!(r.params.m, 4 * r.orchestra.unicast_slotframe_len);
        }
    }

    #[test]
    fn expansion_order_and_overrides() {
        let f = ScenarioFile::parse(SMALL).unwrap();
        let runs = expand(&f, &Overrides::default()).unwrap();
        assert_eq!(runs.len(), 2 * 2 * 2 * 2);
        assert_eq!(runs[0].scenario_id, "small-0");
        assert_eq!(runs[1].params.seed, 2);
        assert_eq!(runs[1].rate_ppm, 30.0);
        assert_eq!(runs[4].rate_ppm, 60.5);
        let ov = Overrides {
            seeds: Some(1),
            seed: Some(40),
            duration_min: None,
        };
        let runs = expand(&f, &ov).unwrap();
        assert_eq!(runs.len(), 8);
        assert!(runs.iter().all(|r| r.params.seed == 40));
    }

    #[test]
    fn unknown_key_is_named() {
        let bad = SMALL.replace("seeds = 2", "seeds = 2\nwarmup = 3");
        let e = ScenarioFile::parse(&bad).unwrap_err().to_string();
        assert!(e.contains("warmup"), "{e}");
        let bad = SMALL.replace("[traffic]", "[traffic]\nburst = true");
        assert!(ScenarioFile::parse(&bad)
            .unwrap_err()
            .to_string()
            .contains("burst"));
    }

    #[test]
    fn invalid_values_rejected() {
        let bad = SMALL.replace("seeds = 2", "seeds = 0");
        let f = ScenarioFile::parse(&bad).unwrap();
        assert!(matches!(
            expand(&f, &Overrides::default()),
            Err(ExperimentError::Config(_))
        ));
        let bad = SMALL.replace("[run]", "[game]\nq_max = 0\n[run]");
        let f = ScenarioFile::parse(&bad).unwrap();
        assert!(expand(&f, &Overrides::default()).is_err());
    }

    #[test]
    fn runs_are_deterministic_and_ordered() {
        let f = ScenarioFile::parse(SMALL).unwrap();
        let specs = expand(&f, &Overrides::default()).unwrap();
        let a = run_all(&specs, Some(3), Keep::default()).unwrap();
        let b = run_all(&specs, Some(1), Keep::default()).unwrap();
        let rows = |rs: &[RunResult]| rs.iter().map(|r| r.row.to_csv()).collect::<Vec<_>>();
        assert_eq!(rows(&a), rows(&b));
        assert!(a.iter().all(|r| r.conserved));
        let s = summary_rows(&a);
        assert_eq!(s.len(), 8);
        assert_eq!(s[0].summary.runs, 2);
    }
}
