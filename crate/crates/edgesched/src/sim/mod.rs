//! Deterministic interval-grained co-simulator of an edge cluster: workload
//! arrivals, contention dynamics, migrations, ground-truth fault labels, and
//! QoS accounting. Serves both as the environment and as the single-interval
//! oracle queried during schedule optimization.

mod cluster;
mod episode;
mod labels;
mod step;
mod workload;

pub use cluster::{
    ClusterState, CompletedTask, HostSpec, Resources, ScheduleMatrix, SimError, TaskProfile,
    TaskSpec, TaskState,
};
pub use episode::{
    observe, run_episode, DecisionContext, EpisodeLog, EpisodeMeta, FeatureMode, IntervalRecord,
    Policy, Simulator, StateObs,
};
pub use labels::{label_utilization, FaultKinds, GroundTruthLabeler};
pub use step::{
    compute_qos, contention_slowdown, jain_fairness, per_profile_percentile, percentile,
    IntervalOutcome, QosNormalizer,
};
pub use workload::{spawn_tasks, BurstConfig, ProfileShape, SimConfig};
