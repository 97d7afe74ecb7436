use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{invalid, Result};
use crate::nn::{Linear, MetaModel};
use crate::tasks::TaskInstance;

use super::config::{EvalHead, MetaConfig};
use super::inner::{inner_adapt, targets, AdaptationStart};
use super::loss::task_loss;

/// Mean of a sample with its normal-approximation 95% half-width.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MseSummary {
    pub mean: f64,
    /// `1.96 · s / √n` with the sample standard deviation `s`; `None` for
    /// a single value.
    pub ci95: Option<f64>,
    pub values: Vec<f64>,
}

pub fn mean_ci95(values: &[f64]) -> Result<MseSummary> {
    if values.is_empty() {
        return Err(invalid("cannot summarize an empty sample"));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let ci95 = (values.len() > 1).then(|| {
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        1.96 * var.sqrt() / n.sqrt()
    });
    Ok(MseSummary {
        mean,
        ci95,
        values: values.to_vec(),
    })
}

/// Query MSE after adapting a fresh zero head (and, unless the method is
/// ANIL, the extractor) on each task's full support set.
pub fn evaluate(model: &MetaModel, tasks: &[TaskInstance], config: &MetaConfig) -> Result<MseSummary> {
    if tasks.is_empty() {
        return Err(invalid("empty evaluation set"));
    }
    let mut eval_config = config.clone();
    eval_config.second_order = false;
    let losses = tasks
        .iter()
        .enumerate()
        .map(|(i, task)| {
            let tape = Tape::with_checks(config.checked);
            let bound = model.bind(&tape);
            let head = eval_head(model, config.eval_head).bind(&tape);
            let start = AdaptationStart {
                extractor: &bound.extractor,
                head,
                rates: bound.inner_lr.as_ref(),
            };
            let adapted = inner_adapt(&tape, start, i, &task.support, &eval_config)?;
            query_mse(adapted.predict_points(&tape, &task.query)?, targets(&tape, &task.query))
        })
        .collect::<Result<Vec<_>>>()?;
    mean_ci95(&losses)
}

fn eval_head(model: &MetaModel, kind: EvalHead) -> Linear {
    let mut head = Linear::zeros(model.feature_width(), 1);
    if kind == EvalHead::Mean {
        let n = model.heads.len() as f64;
        for h in &model.heads {
            for (a, b) in head.weight.data_mut().iter_mut().zip(h.weight.data()) {
                *a += b / n;
            }
            for (a, b) in head.bias.data_mut().iter_mut().zip(h.bias.data()) {
                *a += b / n;
            }
        }
    }
    head
}

/// Query MSE of the unadapted zero head, i.e. of predicting 0 everywhere.
pub fn pre_adaptation_mse(tasks: &[TaskInstance]) -> Result<MseSummary> {
    if tasks.is_empty() {
        return Err(invalid("empty evaluation set"));
    }
    let losses: Vec<f64> = tasks
        .iter()
        .map(|t| t.query.iter().map(|p| p.y * p.y).sum::<f64>() / t.query.len() as f64)
        .collect();
    mean_ci95(&losses)
}

fn query_mse(pred: Var<'_>, y: Var<'_>) -> Result<f64> {
    Ok(task_loss(pred, y)?.value().data()[0])
}
