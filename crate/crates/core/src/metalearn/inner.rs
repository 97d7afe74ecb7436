use crate::autodiff::{grad_through_update, StepRate, Tape, Tensor, Var};
use crate::error::{invalid, Error, Result};
use crate::nn::{forward_features, BoundRates, LinearVars};
use crate::tasks::Point;

use super::config::{MetaConfig, Method};
use super::loss::task_loss;

/// Parameters of one task-specific model after inner adaptation. In
/// second-order mode they stay differentiable back to the base parameters.
#[derive(Clone, Debug)]
pub struct AdaptedModel<'t> {
    pub task: usize,
    pub extractor: Vec<LinearVars<'t>>,
    pub head: LinearVars<'t>,
}

impl<'t> AdaptedModel<'t> {
    pub fn predict(&self, x: Var<'t>) -> Result<Var<'t>> {
        self.head.forward(forward_features(&self.extractor, x)?)
    }

    pub fn predict_points(&self, tape: &'t Tape, points: &[Point]) -> Result<Var<'t>> {
        self.predict(inputs(tape, points))
    }
}

/// Column of the `x` values.
pub fn inputs<'t>(tape: &'t Tape, points: &[Point]) -> Var<'t> {
    tape.constant(Tensor::column(points.iter().map(|p| p.x).collect()))
}

/// Column of the `y` values.
pub fn targets<'t>(tape: &'t Tape, points: &[Point]) -> Var<'t> {
    tape.constant(Tensor::column(points.iter().map(|p| p.y).collect()))
}

/// Base parameters a task starts adapting from.
#[derive(Clone, Debug)]
pub struct AdaptationStart<'a, 't> {
    pub extractor: &'a [LinearVars<'t>],
    pub head: LinearVars<'t>,
    pub rates: Option<&'a BoundRates<'t>>,
}

/// `inner_steps` gradient steps on the task's meta-data support set.
///
/// MetaSGD scales each gradient elementwise by its learnable rates, ANIL
/// leaves the extractor untouched. The gradient path through the inner
/// step is kept only when `config.second_order` is set.
pub fn inner_adapt<'t>(
    tape: &'t Tape,
    start: AdaptationStart<'_, 't>,
    task: usize,
    support: &[Point],
    config: &MetaConfig,
) -> Result<AdaptedModel<'t>> {
    if support.is_empty() {
        return Err(invalid(format!("task {task}: empty support set")));
    }
    let x = inputs(tape, support);
    let y = targets(tape, support);
    let first_order = !config.second_order;
    let mut adapted = AdaptedModel {
        task,
        extractor: start.extractor.to_vec(),
        head: start.head,
    };
    let rates = match config.method {
        Method::MetaSgd => Some(
            start
                .rates
                .ok_or_else(|| invalid("metasgd needs inner learning rates on the model"))?,
        ),
        _ => None,
    };
    for step in 0..config.inner_steps {
        let loss = task_loss(adapted.predict(x)?, y)?;
        let value = loss.value().data()[0];
        if !value.is_finite() {
            return Err(Error::NonFiniteLoss {
                task,
                detail: format!("inner step {step}, support loss {value}"),
            });
        }
        let adapt_extractor = config.method != Method::Anil;
        let mut params: Vec<Var<'t>> = Vec::new();
        let mut step_rates: Vec<StepRate<'t>> = Vec::new();
        if adapt_extractor {
            for (i, layer) in adapted.extractor.iter().enumerate() {
                params.extend(layer.vars());
                match rates {
                    Some(r) => step_rates.extend(r.extractor[i].vars().map(StepRate::PerElement)),
                    None => step_rates.extend([StepRate::Scalar(config.alpha); 2]),
                }
            }
        }
        params.extend(adapted.head.vars());
        match rates {
            Some(r) => step_rates.extend(r.head.vars().map(StepRate::PerElement)),
            None => step_rates.extend([StepRate::Scalar(config.alpha); 2]),
        }
        let grads = tape.grad(loss, &params, !first_order)?;
        let updated = grad_through_update(&params, &grads, &step_rates, first_order)?;
        let (body, head) = updated.split_at(updated.len() - 2);
        if adapt_extractor {
            adapted.extractor = body.chunks(2).map(LinearVars::from_vars).collect();
        }
        adapted.head = LinearVars::from_vars(head);
    }
    Ok(adapted)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{init_model, Linear};

    fn pts(xy: &[(f64, f64)]) -> Vec<Point> {
        xy.iter().map(|&(x, y)| Point { x, y }).collect()
    }

    #[test]
    fn zero_alpha_keeps_parameters() {
        let model = init_model(&[1, 8, 8], 1, 4).unwrap();
        let tape = Tape::new();
        let b = model.bind(&tape);
        let cfg = MetaConfig {
            alpha: 0.0,
            ..MetaConfig::default()
        };
        let start = AdaptationStart {
            extractor: &b.extractor,
            head: b.heads[0],
            rates: None,
        };
        let a = inner_adapt(&tape, start, 0, &pts(&[(0.5, 1.0), (-1.0, 2.0)]), &cfg).unwrap();
        for (l, bl) in a.extractor.iter().zip(&b.extractor) {
            assert!(l.weight.value().bit_eq(&bl.weight.value()));
            assert!(l.bias.value().bit_eq(&bl.bias.value()));
        }
        assert!(a.head.weight.value().bit_eq(&b.heads[0].weight.value()));
    }

    #[test]
    fn scalar_head_step() {
        // no extractor layers: feature = x, prediction = θ x + 0
        let mut model = init_model(&[1], 1, 0).unwrap();
        model.heads[0] = Linear {
            weight: Tensor::new(vec![1, 1], vec![1.0]).unwrap(),
            bias: Tensor::vector(vec![0.0]),
        };
        let tape = Tape::new();
        let b = model.bind(&tape);
        let cfg = MetaConfig {
            alpha: 0.1,
            ..MetaConfig::default()
        };
        let start = AdaptationStart {
            extractor: &b.extractor,
            head: b.heads[0],
            rates: None,
        };
        let a = inner_adapt(&tape, start, 0, &pts(&[(1.0, 0.0)]), &cfg).unwrap();
        assert!((a.head.weight.value().data()[0] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn anil_freezes_extractor() {
        let model = init_model(&[1, 6, 6], 1, 8).unwrap();
        let tape = Tape::new();
        let b = model.bind(&tape);
        let cfg = MetaConfig {
            method: Method::Anil,
            inner_steps: 3,
            ..MetaConfig::default()
        };
        let start = AdaptationStart {
            extractor: &b.extractor,
            head: b.heads[0],
            rates: None,
        };
        let a = inner_adapt(&tape, start, 0, &pts(&[(0.5, 1.0), (2.0, -1.0)]), &cfg).unwrap();
        for (l, bl) in a.extractor.iter().zip(&b.extractor) {
            assert_eq!(l.weight.index(), bl.weight.index());
            assert_eq!(l.bias.index(), bl.bias.index());
        }
        assert!(!a.head.weight.value().bit_eq(&b.heads[0].weight.value()));
    }

    #[test]
    fn metasgd_requires_rates() {
        let model = init_model(&[1, 4], 1, 8).unwrap();
        let tape = Tape::new();
        let b = model.bind(&tape);
        let cfg = MetaConfig {
            method: Method::MetaSgd,
            ..MetaConfig::default()
        };
        let start = AdaptationStart {
            extractor: &b.extractor,
            head: b.heads[0],
            rates: None,
        };
        assert!(inner_adapt(&tape, start, 0, &pts(&[(0.5, 1.0)]), &cfg).is_err());
    }

    #[test]
    fn non_finite_support_loss_is_reported() {
        let model = init_model(&[1, 4], 1, 8).unwrap();
        let tape = Tape::unchecked();
        let b = model.bind(&tape);
        let cfg = MetaConfig::default();
        let start = AdaptationStart {
            extractor: &b.extractor,
            head: b.heads[0],
            rates: None,
        };
        let err = inner_adapt(&tape, start, 3, &pts(&[(0.5, f64::NAN)]), &cfg).unwrap_err();
        assert!(matches!(err, Error::NonFiniteLoss { task: 3, .. }));
        let start = AdaptationStart {
            extractor: &b.extractor,
            head: b.heads[0],
            rates: None,
        };
        assert!(inner_adapt(&tape, start, 0, &[], &cfg).is_err());
    }
}
