//! Deterministic discrete-event simulation of a heterogeneous server pool.
//!
//! Arriving tasks are dispatched by a pluggable [`policies::Policy`]: the
//! classic round-robin, least-connections and smooth weighted round-robin
//! baselines, or a tabular Q-learning agent from [`rl`]. Workloads are
//! pre-generated ([`workload`]) so every policy under comparison replays the
//! identical arrival trace, and [`metrics`] turns each run into response-time,
//! utilization and completion-rate summaries with byte-stable exports.

pub mod error;
pub mod metrics;
pub mod policies;
pub mod rl;
pub mod rng;
pub mod sim;
pub mod workload;

pub use error::{Error, Result};
pub use metrics::{CompletedTaskRecord, RunResult, RunSummary, UtilizationSample};
pub use policies::{Policy, PolicyKind};
pub use sim::{run, ClusterSnapshot, RunOptions, ServerSpec, SimTime, Task};
pub use workload::{SizeDist, TaskTrace, TrafficKind, WorkloadSpec};
