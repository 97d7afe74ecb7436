use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::tasks::Strategy;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    #[default]
    Maml,
    /// Learnable per-parameter inner learning rates.
    MetaSgd,
    /// Inner loop adapts the head only.
    Anil,
}

impl std::str::FromStr for Method {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "maml" => Ok(Self::Maml),
            "metasgd" | "meta-sgd" => Ok(Self::MetaSgd),
            "anil" => Ok(Self::Anil),
            other => Err(invalid(format!("unknown method {other:?}"))),
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Maml => "maml",
            Self::MetaSgd => "metasgd",
            Self::Anil => "anil",
        })
    }
}

/// How the relation matrix is obtained.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MatrixMode {
    /// Similarity weights `ω` are trained with the outer step.
    #[default]
    Learned,
    /// Plain cosine of the meta-data feature means: `ω` stays all-ones and
    /// no gradient flows through the matrix.
    Fixed,
}

impl std::str::FromStr for MatrixMode {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "learned" => Ok(Self::Learned),
            "fixed" => Ok(Self::Fixed),
            other => Err(invalid(format!("unknown matrix mode {other:?}"))),
        }
    }
}

impl std::fmt::Display for MatrixMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Learned => "learned",
            Self::Fixed => "fixed",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum OptimizerKind {
    /// Gradient descent with heavy-ball momentum and L2 weight decay.
    Sgd { momentum: f64, weight_decay: f64 },
    Adam {
        beta1: f64,
        beta2: f64,
        eps: f64,
        weight_decay: f64,
    },
}

impl Default for OptimizerKind {
    fn default() -> Self {
        Self::Sgd {
            momentum: 0.8,
            weight_decay: 0.7e-5,
        }
    }
}

/// Initial head for adapting to an unseen task.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalHead {
    /// All-zero weights and bias.
    #[default]
    Zero,
    /// Elementwise mean of the head bank.
    Mean,
}

impl std::str::FromStr for EvalHead {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "zero" => Ok(Self::Zero),
            "mean" => Ok(Self::Mean),
            other => Err(invalid(format!("unknown eval head {other:?}"))),
        }
    }
}

impl std::fmt::Display for EvalHead {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Zero => "zero",
            Self::Mean => "mean",
        })
    }
}

/// Every knob of the bi-level optimizer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetaConfig {
    /// Inner (adaptation) learning rate.
    pub alpha: f64,
    /// Outer (meta) learning rate.
    pub beta: f64,
    /// Weight of the relation-aware consistency term.
    pub lambda: f64,
    pub method: Method,
    pub second_order: bool,
    pub inner_steps: usize,
    /// Tasks per meta-batch, one head each.
    pub n_tasks: usize,
    pub epochs: usize,
    pub batches_per_epoch: usize,
    pub seed: u64,
    pub trlearner: bool,
    pub matrix_mode: MatrixMode,
    /// Number of similarity heads `K`.
    pub similarity_heads: usize,
    /// Let relation gradients reach the feature extractor.
    pub relation_grad_to_extractor: bool,
    pub optimizer: OptimizerKind,
    /// Keep MetaSGD rates fixed at `alpha`.
    pub freeze_inner_lr: bool,
    /// Zero every head before each meta-batch.
    pub reset_heads: bool,
    pub eval_head: EvalHead,
    pub layer_sizes: Vec<usize>,
    pub metadata_strategy: Strategy,
    /// Support points per task used as meta-data; `None` keeps all.
    pub metadata_samples: Option<usize>,
    /// Log a relation matrix snapshot every this many epochs (0 = never).
    pub snapshot_every: usize,
    /// NaN/Inf guard on every recorded op.
    pub checked: bool,
    /// Record wall-clock time in logs (breaks byte-identical reruns).
    pub record_timing: bool,
}

impl Default for MetaConfig {
    fn default() -> Self {
        Self {
            alpha: 0.01,
            beta: 0.1,
            lambda: 0.6,
            method: Method::Maml,
            second_order: true,
            inner_steps: 1,
            n_tasks: 4,
            epochs: 20,
            batches_per_epoch: 100,
            seed: 0,
            trlearner: true,
            matrix_mode: MatrixMode::Learned,
            similarity_heads: 4,
            relation_grad_to_extractor: true,
            optimizer: OptimizerKind::default(),
            freeze_inner_lr: false,
            reset_heads: true,
            eval_head: EvalHead::Zero,
            layer_sizes: vec![1, 40, 40],
            metadata_strategy: Strategy::Uniform,
            metadata_samples: None,
            snapshot_every: 1,
            checked: false,
            record_timing: false,
        }
    }
}

impl MetaConfig {
    /// Names of every field whose value is out of range.
    pub fn problems(&self) -> Vec<(&'static str, String)> {
        let mut bad = Vec::new();
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            bad.push(("alpha", format!("must be > 0, got {}", self.alpha)));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            bad.push(("beta", format!("must be >= 0, got {}", self.beta)));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            bad.push(("lambda", format!("must be >= 0, got {}", self.lambda)));
        }
        if self.inner_steps == 0 {
            bad.push(("inner_steps", "must be >= 1".into()));
        }
        if self.n_tasks == 0 {
            bad.push(("batch_tasks", "must be >= 1".into()));
        }
        if self.trlearner && self.n_tasks < 2 {
            bad.push(("batch_tasks", "relation learning needs >= 2 tasks".into()));
        }
        if self.similarity_heads == 0 {
            bad.push(("heads", "must be >= 1".into()));
        }
        if self.layer_sizes.is_empty() || self.layer_sizes.contains(&0) {
            bad.push(("layer_sizes", format!("invalid {:?}", self.layer_sizes)));
        }
        if self.metadata_samples == Some(0) {
            bad.push(("metadata_samples", "must be >= 1".into()));
        }
        bad
    }

    pub fn validate(&self) -> Result<()> {
        let bad = self.problems();
        if bad.is_empty() {
            Ok(())
        } else {
            Err(invalid(
                bad.iter()
                    .map(|(k, v)| format!("{k}: {v}"))
                    .collect::<Vec<_>>()
                    .join("; "),
            ))
        }
    }

    /// Whether the consistency term contributes to the objective.
    pub fn uses_consistency(&self) -> bool {
        self.trlearner && self.lambda != 0.0
    }
}
