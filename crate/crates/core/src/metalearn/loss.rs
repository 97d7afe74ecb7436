use crate::autodiff::Var;
use crate::error::{invalid, Error, Result};

/// Per-sample loss reduced to a scalar var.
pub trait TaskLoss {
    fn loss<'t>(&self, predictions: Var<'t>, targets: Var<'t>) -> Result<Var<'t>>;
}

/// Mean squared error.
#[derive(Clone, Copy, Debug, Default)]
pub struct Mse;

impl TaskLoss for Mse {
    fn loss<'t>(&self, predictions: Var<'t>, targets: Var<'t>) -> Result<Var<'t>> {
        task_loss(predictions, targets)
    }
}

pub fn task_loss<'t>(predictions: Var<'t>, targets: Var<'t>) -> Result<Var<'t>> {
    let (ps, ts) = (predictions.shape(), targets.shape());
    if ps != ts {
        return Err(Error::Shape {
            op: "task_loss",
            shapes: vec![ps, ts],
        });
    }
    if predictions.value().is_empty() {
        return Err(invalid("task_loss on an empty batch"));
    }
    predictions.sub(targets)?.square()?.mean()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{Tape, Tensor};

    fn mse(p: &[f64], t: &[f64]) -> Result<f64> {
        let tape = Tape::new();
        let p = tape.var(Tensor::column(p.to_vec()));
        let t = tape.constant(Tensor::column(t.to_vec()));
        Ok(task_loss(p, t)?.value().item().unwrap())
    }

    #[test]
    fn known_values() {
        assert_eq!(mse(&[0.5, -2.0], &[0.5, -2.0]).unwrap(), 0.0);
        assert_eq!(mse(&[0.0, 0.0], &[1.0, 1.0]).unwrap(), 1.0);
        assert_eq!(mse(&[1.0, 3.0], &[0.0, 0.0]).unwrap(), 5.0);
    }

    #[test]
    fn empty_and_mismatched_rejected() {
        assert!(mse(&[], &[]).is_err());
        assert!(mse(&[1.0], &[1.0, 2.0]).is_err());
    }
}
