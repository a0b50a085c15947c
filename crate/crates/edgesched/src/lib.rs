//! Closed-loop fault-aware scheduling for a simulated edge cluster.
//!
//! An interval-grained co-simulator generates workload and resource dynamics,
//! a self-supervised surrogate network predicts the next state window plus a
//! fault prototype, and a gradient-based optimizer steers the task placement
//! matrix away from predicted contention. The harness wires these into
//! dataset generation, offline training, online scheduling, and metric
//! reporting.

pub mod detect;
pub mod harness;
pub mod metrics;
pub mod sched;
pub mod seed;
pub mod sim;
pub mod surrogate;
pub mod telemetry;
pub mod train;
