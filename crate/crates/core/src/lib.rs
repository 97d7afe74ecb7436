//! Gradient-based meta-learning with a learned task-relation regularizer.
//!
//! The crate is layered bottom-up:
//!
//! * [`autodiff`]: a reverse-mode tape that can differentiate through one
//!   inner gradient step.
//! * [`nn`]: the meta-model, a shared MLP feature extractor plus one linear
//!   head per task slot in a meta-batch.
//! * [`tasks`]: synthetic sinusoid and harmonic regression tasks and the
//!   meta-data samplers that pick the points used to describe a task.
//! * [`relation`]: task representations, the multi-head cosine similarity
//!   layer and the task relation matrix.
//! * [`metalearn`]: inner adaptation, the relation-aware consistency loss,
//!   the outer update, training and evaluation.

pub mod autodiff;
pub mod error;
pub mod metalearn;
pub mod nn;
pub mod relation;
pub mod seed;
pub mod tasks;

pub use error::{Error, Result};
