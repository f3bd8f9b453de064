//! Deterministic federated-learning simulation: local SGD, aggregation
//! schemes, Byzantine attacks and per-round metrics.
//!
//! Users run concurrently on a rayon pool. Every random draw comes from a
//! keyed stream and every reduction runs in ascending user order, so the
//! metrics stream is the same for any thread count.

pub mod attack;
pub mod baselines;
pub mod config;
pub mod metrics;
pub mod sim;

pub use attack::{inject_attack, select_attackers};
pub use baselines::{
    fedavg_aggregate, laplace_mechanism, local_sgd_steps, signsgd_aggregate, signsgd_encode,
    step_size, LrSchedule,
};
pub use config::{AttackKind, DatasetKind, FLConfig, FeatureScaling, LrMode, ModelChoice, Scheme};
pub use metrics::{compute_snr, write_metrics_csv, RoundMetrics, Summary};
pub use sim::{run_experiment, run_experiment_with, theorem1_bound, Environment, RunOutput};
