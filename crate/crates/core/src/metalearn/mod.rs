//! The bi-level optimization engine.
//!
//! Each meta-batch binds task `i` to head `i`. Every task adapts on its
//! meta-data support set ([`inner_adapt`]), the relation matrix is built
//! from the shared extractor, and the outer step minimizes the mean query
//! loss plus `λ` times the relation-aware consistency loss
//! ([`trlearner_loss`]).

mod config;
mod eval;
mod inner;
mod loss;
mod outer;
mod train;
mod trlearner;

pub use config::{EvalHead, MatrixMode, MetaConfig, Method, OptimizerKind};
pub use eval::{evaluate, mean_ci95, pre_adaptation_mse, MseSummary};
pub use inner::{inner_adapt, inputs, targets, AdaptationStart, AdaptedModel};
pub use loss::{task_loss, Mse, TaskLoss};
pub use outer::{build_objective, MetaLearner, Objective, StepMetrics};
pub use train::{train, LogRecord, TrainingLog};
pub use trlearner::{consistency_loss, trlearner_loss};
