//! Sequential federated learning with discrepancy-aware multi-teacher
//! knowledge distillation.
//!
//! The crate is a deterministic desk-scale simulator: an MLP trained by a
//! sequence of clients per round, distilling from teacher snapshots of the
//! previous round. Baselines (FedSeq, FedAvg) and forgetting diagnostics run
//! on the same machinery.

pub mod data;
pub mod distill;
pub mod engine;
pub mod error;
pub mod experiment;
pub mod metrics;
pub mod model;
pub mod rng;
pub mod selection;

pub use data::{class_distribution, ClassDistribution, Dataset, PartitionSpec};
pub use distill::{KdConfig, Metric, TeacherEnsemble};
pub use engine::{FederationState, Mode, RoundRecord, TrainConfig};
pub use error::{Error, Result};
pub use experiment::{ExperimentConfig, ExperimentResult};
pub use metrics::{EvalTrace, Evaluation};
pub use model::{Logits, ModelParams};
