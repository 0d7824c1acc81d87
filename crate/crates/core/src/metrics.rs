//! Run metrics computed from event traces, and cross-seed summaries.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::sim::{Event, Outcome, Trace, TxKind};
use crate::{SLOTS_PER_MINUTE, SLOT_MS};

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("trace has no end marker")]
    EmptyTrace,
    #[error("no runs to summarize")]
    NoRuns,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub generated_total: u64,
    pub received_total: u64,
    pub pdr: f64,
    pub mean_e2e_delay_ms: f64,
    /// Packets not delivered, per simulated minute.
    pub lost_ppm: f64,
    /// Packets delivered to the roots, per simulated minute.
    pub throughput_ppm: f64,
    pub duty_cycle: f64,
    pub queue_loss_total: u64,
    pub retry_loss_total: u64,
    /// Collisions on dedicated data (or Orchestra unicast) transmissions.
    pub data_collisions: u64,
    pub shared_collisions: u64,
}

/// Metrics of one finished run. Packets still queued at the end count as lost.
pub fn aggregate(trace: &Trace) -> Result<RunMetrics, MetricsError> {
    let total_slots = trace
        .events
        .iter()
        .rev()
        .find_map(|e| match e {
            Event::End { slots, .. } => Some(*slots),
            _ => None,
        })
        .ok_or(MetricsError::EmptyTrace)?;

    let mut created = BTreeMap::new();
    let mut m = RunMetrics::default();
    let mut delay_slots = 0u64;
    let mut radio = Vec::new();
    for e in &trace.events {
        match e {
            Event::Gen { asn, uid, .. } => {
                m.generated_total += 1;
                created.insert(*uid, *asn);
            }
            Event::Deliver { asn, uid, .. } => {
                m.received_total += 1;
                delay_slots += asn - created[uid];
            }
            Event::QueueDrop { .. } => m.queue_loss_total += 1,
            Event::RetryDrop { .. } => m.retry_loss_total += 1,
            Event::Tx {
                kind,
                outcome: Outcome::Collision,
                ..
            } => match kind {
                TxKind::Data => m.data_collisions += 1,
                TxKind::Shared => m.shared_collisions += 1,
                TxKind::SixP => {}
            },
            Event::Radio { on_slots, .. } => radio.push(*on_slots),
            _ => {}
        }
    }
    let minutes = total_slots as f64 / SLOTS_PER_MINUTE;
    m.pdr = if m.generated_total == 0 {
        1.0
    } else {
        m.received_total as f64 / m.generated_total as f64
    };
    if m.received_total > 0 {
        m.mean_e2e_delay_ms = delay_slots as f64 * SLOT_MS / m.received_total as f64;
    }
    if minutes > 0.0 {
        m.lost_ppm = (m.generated_total - m.received_total) as f64 / minutes;
        m.throughput_ppm = m.received_total as f64 / minutes;
    }
    if total_slots > 0 && !radio.is_empty() {
        m.duty_cycle = radio
            .iter()
            .map(|&r| r as f64 / total_slots as f64)
            .sum::<f64>()
            / radio.len() as f64;
    }
    Ok(m)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
}

impl Stat {
    pub fn of(xs: &[f64]) -> Stat {
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let std = if xs.len() < 2 {
            0.0
        } else {
            (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        };
        Stat { mean, std }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub runs: usize,
    pub pdr: Stat,
    pub delay_ms: Stat,
    pub lost_ppm: Stat,
    pub throughput_ppm: Stat,
    pub duty_cycle: Stat,
    pub queue_loss: Stat,
    pub received: Stat,
}

/// Mean and sample standard deviation of each field.
pub fn summarize(runs: &[RunMetrics]) -> Result<Summary, MetricsError> {
    if runs.is_empty() {
        return Err(MetricsError::NoRuns);
    }
    let f = |g: fn(&RunMetrics) -> f64| Stat::of(&runs.iter().map(g).collect::<Vec<_>>());
    Ok(Summary {
        runs: runs.len(),
        pdr: f(|r| r.pdr),
        delay_ms: f(|r| r.mean_e2e_delay_ms),
        lost_ppm: f(|r| r.lost_ppm),
        throughput_ppm: f(|r| r.throughput_ppm),
        duty_cycle: f(|r| r.duty_cycle),
        queue_loss: f(|r| r.queue_loss_total as f64),
        received: f(|r| r.received_total as f64),
    })
}

pub const CSV_HEADER: &str =
    "scenario_id,scheduler,seed,rate_ppm,dodag_size,slotframe_len,pdr,delay_ms,lost_ppm,duty_cycle,queue_loss,received";

/// One row of the per-run results table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub scenario_id: String,
    pub scheduler: String,
    pub seed: u64,
    pub rate_ppm: f64,
    pub dodag_size: usize,
    pub slotframe_len: usize,
    pub pdr: f64,
    pub delay_ms: f64,
    pub lost_ppm: f64,
    pub duty_cycle: f64,
    pub queue_loss: u64,
    pub received: u64,
}

impl MetricsRow {
    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{:.6},{:.3},{:.3},{:.6},{},{}",
            self.scenario_id,
            self.scheduler,
            self.seed,
            self.rate_ppm,
            self.dodag_size,
            self.slotframe_len,
            self.pdr,
            self.delay_ms,
            self.lost_ppm,
            self.duty_cycle,
            self.queue_loss,
            self.received
        )
    }
}

pub fn rows_to_csv(rows: &[MetricsRow]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&r.to_csv());
        out.push('\n');
    }
    out
}

pub fn rows_from_csv(text: &str) -> Result<Vec<MetricsRow>, csv::Error> {
    csv::Reader::from_reader(text.as_bytes())
        .deserialize()
        .collect()
}
