//! GT-TSCH scheduling for TSCH low-power mesh networks, an Orchestra-style
//! autonomous baseline, and a deterministic slot-driven simulator that runs
//! both against the same traffic.
//!
//! The crate is organised bottom-up:
//!
//! * [`topology`]: static DODAG formation, Ranks and link-quality helpers.
//! * [`channels`]: interference-aware channel allocation and the
//!   EB / ASK-CHANNEL exchange.
//! * [`slotframe`]: the five timeslot types and slotframe construction.
//! * [`cellalloc`]: 6P ADD/DELETE handling and the Rx-cell grant policy.
//! * [`game`]: payoff model and the closed-form optimal Tx-cell count.
//! * [`sim`]: the slot engine.
//! * [`baseline`]: receiver-based Orchestra schedules.
//! * [`metrics`]: run metrics computed from event traces.
//! * [`experiment`]: scenario files and parameter sweeps.
//! * [`lint`]: schedule / channel-plan linting over text dumps.

pub mod baseline;
pub mod cellalloc;
pub mod channels;
pub mod experiment;
pub mod game;
pub mod lint;
pub mod metrics;
pub mod sim;
pub mod slotframe;
pub mod topology;

pub use topology::NodeId;

/// Length of one TSCH timeslot in milliseconds.
pub const SLOT_MS: f64 = 15.0;

/// Number of timeslots in one simulated minute.
pub const SLOTS_PER_MINUTE: f64 = 60_000.0 / SLOT_MS;
