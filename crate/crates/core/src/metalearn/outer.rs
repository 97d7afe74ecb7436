use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{invalid, Error, Result};
use crate::nn::{init_model, BoundModel, MetaModel};
use crate::relation::{build_matrix, task_representation, RelationMatrix, RelationVars, SimilarityLayer};
use crate::tasks::TaskBatch;

use super::config::{MatrixMode, MetaConfig, Method, OptimizerKind};
use super::inner::{inner_adapt, targets, AdaptationStart, AdaptedModel};
use super::loss::task_loss;
use super::trlearner::trlearner_loss;

/// First-moment (and for Adam second-moment) buffers, one per parameter.
#[derive(Clone, Debug, Default)]
pub struct OptimizerState {
    first: Vec<Tensor>,
    second: Vec<Tensor>,
    steps: u64,
}

impl OptimizerState {
    fn step(&mut self, kind: OptimizerKind, lr: f64, params: &mut [&mut Tensor], grads: &[Tensor]) {
        if self.first.is_empty() {
            self.first = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
            if matches!(kind, OptimizerKind::Adam { .. }) {
                self.second = self.first.clone();
            }
        }
        self.steps += 1;
        for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            match kind {
                OptimizerKind::Sgd {
                    momentum,
                    weight_decay,
                } => {
                    let v = self.first[k].data_mut();
                    for ((w, &gi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(v) {
                        let d = gi + weight_decay * *w;
                        *vi = if self.steps == 1 { d } else { momentum * *vi + d };
                        *w -= lr * *vi;
                    }
                }
                OptimizerKind::Adam {
                    beta1,
                    beta2,
                    eps,
                    weight_decay,
                } => {
                    let t = self.steps as i32;
                    let (c1, c2) = (1.0 - beta1.powi(t), 1.0 - beta2.powi(t));
                    let m = self.first[k].data_mut();
                    let s = self.second[k].data_mut();
                    for (((w, &gi), mi), si) in p.data_mut().iter_mut().zip(g.data()).zip(m).zip(s) {
                        let d = gi + weight_decay * *w;
                        *mi = beta1 * *mi + (1.0 - beta1) * d;
                        *si = beta2 * *si + (1.0 - beta2) * d * d;
                        *w -= lr * (*mi / c1) / ((*si / c2).sqrt() + eps);
                    }
                }
            }
        }
    }
}

/// Outcome of one outer step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    /// Query loss of each adapted model, before the update.
    pub query_losses: Vec<f64>,
    /// Consistency loss per task; empty when the term is off.
    pub consistency_losses: Vec<f64>,
    pub objective: f64,
    pub matrix: Option<RelationMatrix>,
}

/// The recorded bi-level objective of one meta-batch.
pub struct Objective<'t> {
    pub total: Var<'t>,
    pub query_losses: Vec<Var<'t>>,
    pub consistency_losses: Vec<Var<'t>>,
    pub adapted: Vec<AdaptedModel<'t>>,
    pub matrix: Option<RelationVars<'t>>,
}

/// Records `(1/N) Σ_i [L(query_i, f^i) + λ L_TR(query_i, f^i)]` on `tape`.
///
/// The relation matrix is built from the base extractor whenever relation
/// learning is on; the consistency term is added only when `λ != 0`.
pub fn build_objective<'t>(
    tape: &'t Tape,
    model: &BoundModel<'t>,
    omega: &[Var<'t>],
    batch: &TaskBatch,
    config: &MetaConfig,
) -> Result<Objective<'t>> {
    let n = batch.len();
    if n == 0 {
        return Err(invalid("empty meta-batch"));
    }
    if n > model.heads.len() {
        return Err(invalid(format!(
            "{n} tasks but only {} heads",
            model.heads.len()
        )));
    }
    let matrix = if config.trlearner {
        let detach = config.matrix_mode == MatrixMode::Fixed || !config.relation_grad_to_extractor;
        let reps = batch
            .metadata
            .iter()
            .map(|md| {
                let z = task_representation(&model.extractor, tape, md)?;
                Ok(if detach { tape.detach(z) } else { z })
            })
            .collect::<Result<Vec<_>>>()?;
        Some(build_matrix(omega, &reps)?)
    } else {
        None
    };

    let mut adapted = Vec::with_capacity(n);
    for (i, md) in batch.metadata.iter().enumerate() {
        let start = AdaptationStart {
            extractor: &model.extractor,
            head: model.heads[i],
            rates: model.inner_lr.as_ref(),
        };
        adapted.push(inner_adapt(tape, start, i, &md.support, config)?);
    }

    let mut query_losses = Vec::with_capacity(n);
    for (a, md) in adapted.iter().zip(&batch.metadata) {
        let loss = task_loss(a.predict_points(tape, &md.query)?, targets(tape, &md.query))?;
        query_losses.push(loss);
    }

    let mut consistency_losses = Vec::new();
    if config.uses_consistency() {
        let m = matrix.as_ref().expect("matrix is built when trlearner is on");
        for (i, md) in batch.metadata.iter().enumerate() {
            consistency_losses.push(trlearner_loss(tape, &adapted, m, i, &md.query)?);
        }
    }

    let mut sum: Option<Var<'t>> = None;
    for i in 0..n {
        let term = match consistency_losses.get(i) {
            Some(tr) => query_losses[i].add(tr.scale(config.lambda)?)?,
            None => query_losses[i],
        };
        sum = Some(match sum {
            Some(s) => s.add(term)?,
            None => term,
        });
    }
    let total = sum.unwrap().scale(1.0 / n as f64)?;
    Ok(Objective {
        total,
        query_losses,
        consistency_losses,
        adapted,
        matrix,
    })
}

/// Meta-model, similarity layer and optimizer state under one config.
#[derive(Clone, Debug)]
pub struct MetaLearner {
    pub model: MetaModel,
    pub similarity: SimilarityLayer,
    pub config: MetaConfig,
    optimizer: OptimizerState,
}

impl MetaLearner {
    /// Fresh model and similarity layer from `config.seed`.
    pub fn new(config: MetaConfig) -> Result<Self> {
        config.validate()?;
        let mut model = init_model(&config.layer_sizes, config.n_tasks, config.seed)?;
        if config.method == Method::MetaSgd {
            model.enable_inner_rates(config.alpha);
        }
        Self::with_model(model, config)
    }

    pub fn with_model(model: MetaModel, config: MetaConfig) -> Result<Self> {
        config.validate()?;
        if config.method == Method::MetaSgd && model.inner_lr.is_none() {
            return Err(invalid("metasgd needs a model with inner learning rates"));
        }
        let similarity = SimilarityLayer::new(config.similarity_heads, model.feature_width())?;
        Ok(Self {
            model,
            similarity,
            config,
            optimizer: OptimizerState::default(),
        })
    }

    fn omega_trainable(&self) -> bool {
        self.config.trlearner && self.config.matrix_mode == MatrixMode::Learned
    }

    fn bind<'t>(&self, tape: &'t Tape) -> (BoundModel<'t>, Vec<Var<'t>>) {
        let bound = self.model.bind(tape);
        let omega = if self.omega_trainable() {
            self.similarity.bind(tape)
        } else {
            self.similarity.bind_frozen(tape)
        };
        (bound, omega)
    }

    /// Objective value for `batch` at the current parameters.
    pub fn objective_value(&self, batch: &TaskBatch) -> Result<f64> {
        let tape = Tape::with_checks(self.config.checked);
        let (bound, omega) = self.bind(&tape);
        let obj = build_objective(&tape, &bound, &omega, batch, &self.config)?;
        let v = obj.total.value().data()[0];
        Ok(v)
    }

    /// Outer gradient for every model parameter (in [`MetaModel::params`]
    /// order) followed by every `ω_k`.
    pub fn outer_gradient(&self, batch: &TaskBatch) -> Result<(Vec<Tensor>, StepMetrics)> {
        let tape = Tape::with_checks(self.config.checked);
        let (bound, omega) = self.bind(&tape);
        let obj = build_objective(&tape, &bound, &omega, batch, &self.config)?;
        let objective = obj.total.value().data()[0];
        if !objective.is_finite() {
            let worst = obj
                .query_losses
                .iter()
                .position(|l| !l.value().data()[0].is_finite())
                .unwrap_or(0);
            return Err(Error::NonFiniteLoss {
                task: worst,
                detail: format!("outer objective {objective}"),
            });
        }
        let mut wrt = bound.vars();
        wrt.extend(omega.iter().copied());
        let grads = tape.grad(obj.total, &wrt, false)?;
        let metrics = StepMetrics {
            query_losses: obj.query_losses.iter().map(|l| l.value().data()[0]).collect(),
            consistency_losses: obj
                .consistency_losses
                .iter()
                .map(|l| l.value().data()[0])
                .collect(),
            objective,
            matrix: obj.matrix.as_ref().map(|m| m.values()),
        };
        Ok((grads.iter().map(|g| (*g.value()).clone()).collect(), metrics))
    }

    /// One outer update on `batch`.
    pub fn outer_step(&mut self, batch: &TaskBatch) -> Result<StepMetrics> {
        let (grads, metrics) = self.outer_gradient(batch)?;
        let n_model = self.model.params().len();
        let n_rates = self
            .model
            .inner_lr
            .as_ref()
            .map_or(0, |r| 2 * (r.extractor.len() + 1));
        let freeze_rates = self.config.freeze_inner_lr;
        let omega_trainable = self.omega_trainable();

        let mut params: Vec<&mut Tensor> = Vec::new();
        let mut selected: Vec<Tensor> = Vec::new();
        for (k, p) in self.model.params_mut().into_iter().enumerate() {
            let is_rate = k >= n_model - n_rates;
            if is_rate && freeze_rates {
                continue;
            }
            params.push(p);
            selected.push(grads[k].clone());
        }
        if omega_trainable {
            for (k, w) in self.similarity.omega.iter_mut().enumerate() {
                params.push(w);
                selected.push(grads[n_model + k].clone());
            }
        }
        self.optimizer
            .step(self.config.optimizer, self.config.beta, &mut params, &selected);
        Ok(metrics)
    }
}
