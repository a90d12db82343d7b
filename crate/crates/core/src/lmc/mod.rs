//! Scalable gradient estimators built on historical values: local message
//! compensation (LMC), its forward-only ablation, GAS, and the Cluster-GCN
//! baseline, plus the training engine that drives them.

pub mod beta;
pub mod compensated;
pub mod engine;
pub mod estimator;
pub mod store;

pub use beta::{beta_for, boundary_betas, BetaSchedule, ScoreKind};
pub use compensated::{backward_compensated, forward_compensated, TempValues};
pub use engine::{lmc_step, sgd_update, Engine, StepReport};
pub use estimator::{cluster_gradients, minibatch_gradients, Estimate, Estimator, EstimatorMode};
pub use store::{HistoricalStore, TouchLog};
