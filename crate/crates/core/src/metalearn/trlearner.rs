use crate::autodiff::{Tape, Var};
use crate::error::{invalid, Result};
use crate::relation::RelationVars;
use crate::tasks::Point;

use super::inner::{targets, AdaptedModel};

/// Squared error of a weighted average of predictions against `targets`.
///
/// Weights are normalized to sum to one before mixing. `predictions` and
/// `weights` pair up; every weight is a rank-0 var.
pub fn consistency_loss<'t>(
    predictions: &[Var<'t>],
    weights: &[Var<'t>],
    targets: Var<'t>,
) -> Result<Var<'t>> {
    if predictions.is_empty() || predictions.len() != weights.len() {
        return Err(invalid(format!(
            "consistency_loss: {} predictions, {} weights",
            predictions.len(),
            weights.len()
        )));
    }
    let total = weights[1..]
        .iter()
        .try_fold(weights[0], |acc, &w| acc.add(w))?;
    let mut mix: Option<Var<'t>> = None;
    for (&p, &w) in predictions.iter().zip(weights) {
        let term = w.div(total)?.mul_scalar(p)?;
        mix = Some(match mix {
            Some(m) => m.add(term)?,
            None => term,
        });
    }
    mix.unwrap().sub(targets)?.square()?.mean()
}

/// Relation-aware consistency loss of task `task`: task `task`'s query
/// targets against the relation-weighted average of every *other* adapted
/// model's predictions on the same inputs.
pub fn trlearner_loss<'t>(
    tape: &'t Tape,
    adapted: &[AdaptedModel<'t>],
    matrix: &RelationVars<'t>,
    task: usize,
    query: &[Point],
) -> Result<Var<'t>> {
    let n = adapted.len();
    if n < 2 {
        return Err(invalid(format!("consistency loss needs >= 2 tasks, got {n}")));
    }
    if matrix.len() != n || task >= n {
        return Err(invalid(format!(
            "task {task} with {n} adapted models and a {}x{0} matrix",
            matrix.len()
        )));
    }
    if query.is_empty() {
        return Err(invalid(format!("task {task}: empty query set")));
    }
    let mut preds = Vec::with_capacity(n - 1);
    let mut weights = Vec::with_capacity(n - 1);
    for (p, model) in adapted.iter().enumerate() {
        if p == task {
            continue;
        }
        preds.push(model.predict_points(tape, query)?);
        weights.push(matrix.weight(task, p)?);
    }
    consistency_loss(&preds, &weights, targets(tape, query))
}
