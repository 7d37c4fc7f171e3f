//! Seeded discrete-event simulator for WLAN channel contention.
//!
//! `ecasim` models saturated uplink traffic in single-AP and dense multi-AP
//! deployments and compares the IEEE 802.11 DCF (CSMA/CA) against CSMA/ECA,
//! which replaces the random backoff after a successful transmission with a
//! deterministic one, plus its Hysteresis, Fair Share and Schedule Reset
//! extensions.
//!
//! The crate is split along the simulation pipeline:
//!
//! - [`channel`]: path loss, carrier sense and reception outcomes.
//! - [`mac`]: per-node backoff state machines.
//! - [`scenarios`]: topology generators and channel allocation.
//! - [`engine`]: the event loop that drives everything.
//! - [`metrics`]: throughput, failure fraction and fairness.
//! - [`cli`]: batch runner, CSV and plot-data output.
//!
//! ```
//! use ecasim::engine::{run, SimConfig};
//! use ecasim::mac::ProtocolKind;
//! use ecasim::scenarios::gen_single_ap;
//!
//! let scenario = gen_single_ap(4, 5.0, true).unwrap();
//! let config = SimConfig {
//!     duration_s: 0.5,
//!     seed: 7,
//!     protocol: ProtocolKind::Eca,
//!     channel: scenario.channel.clone(),
//!     ..SimConfig::default()
//! };
//! let result = run(&scenario.topology, &config).unwrap();
//! assert!(result.total_successes() > 0);
//! ```

// `!(x > 0.0)` also rejects NaN
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod channel;
pub mod cli;
pub mod engine;
pub mod error;
pub mod mac;
pub mod metrics;
pub mod scenarios;

pub use error::{Error, Result};

/// Index of a node inside a [`scenarios::Topology`].
pub type NodeId = usize;

/// Chapters of the guide under `book/`, compiled as doc-tests so that every
/// snippet in the book keeps building against the current API.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/propagation.md")]
    mod propagation {}
    #[doc = include_str!("../../../book/src/backoff.md")]
    mod backoff {}
    #[doc = include_str!("../../../book/src/schedule_reset.md")]
    mod schedule_reset {}
    #[doc = include_str!("../../../book/src/engine.md")]
    mod engine {}
    #[doc = include_str!("../../../book/src/scenarios.md")]
    mod scenarios {}
    #[doc = include_str!("../../../book/src/metrics.md")]
    mod metrics {}
    #[doc = include_str!("../../../book/src/batch_runs.md")]
    mod batch_runs {}
    #[doc = include_str!("../../../README.md")]
    mod readme {}
}
