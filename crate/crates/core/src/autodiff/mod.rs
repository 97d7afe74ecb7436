//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! Gradients are computed by recording vector-Jacobian products on the same
//! tape as the forward pass, so a gradient taken with `create_graph` is an
//! ordinary var and one inner gradient step can be differentiated through.

mod op;
mod tape;
mod tensor;

pub use op::Op;
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

use crate::error::{invalid, Error, Result};

/// Step size of a differentiable gradient step.
#[derive(Clone, Copy, Debug)]
pub enum StepRate<'t> {
    Scalar(f64),
    /// Elementwise rates with the shape of the parameter they scale.
    PerElement(Var<'t>),
}

/// Returns `params[i] - rate_i * inner_grads[i]` as recorded vars.
///
/// In second-order mode the inner gradients must still be connected to the
/// graph so the outer backward pass runs through them; passing a detached
/// gradient is an error rather than a silent first-order fallback. In
/// first-order mode the gradients are detached before the update.
pub fn grad_through_update<'t>(
    params: &[Var<'t>],
    inner_grads: &[Var<'t>],
    rates: &[StepRate<'t>],
    first_order: bool,
) -> Result<Vec<Var<'t>>> {
    if params.len() != inner_grads.len() || params.len() != rates.len() {
        return Err(invalid(format!(
            "grad_through_update: {} params, {} grads, {} rates",
            params.len(),
            inner_grads.len(),
            rates.len()
        )));
    }
    params
        .iter()
        .zip(inner_grads)
        .zip(rates)
        .enumerate()
        .map(|(i, ((&p, &g), rate))| {
            let g = if first_order {
                if g.is_detached() {
                    g
                } else {
                    p.tape().detach(g)
                }
            } else if g.is_detached() {
                return Err(Error::DetachedInnerGrad { index: i });
            } else {
                g
            };
            let step = match *rate {
                StepRate::Scalar(a) => g.scale(a)?,
                StepRate::PerElement(r) => r.mul(g)?,
            };
            p.sub(step)
        })
        .collect()
}

/// Differentiates `loss_fn` at `params` and takes one recorded gradient step.
pub fn sgd_through<'t>(
    loss_fn: impl FnOnce(&[Var<'t>]) -> Result<Var<'t>>,
    params: &[Var<'t>],
    rates: &[StepRate<'t>],
    first_order: bool,
) -> Result<Vec<Var<'t>>> {
    let tape = params
        .first()
        .ok_or_else(|| invalid("sgd_through: no parameters"))?
        .tape();
    let loss = loss_fn(params)?;
    let grads = tape.grad(loss, params, !first_order)?;
    grad_through_update(params, &grads, rates, first_order)
}

#[cfg(test)]
mod tests {
    use super::*;

    // L(θ) = θ², θ' = θ - α L'(θ), outer = L(θ')
    fn outer_grad(theta: f64, alpha: f64, first_order: bool) -> (f64, f64, f64) {
        let tape = Tape::new();
        let p = tape.var(Tensor::scalar(theta));
        let adapted = sgd_through(
            |ps| ps[0].square(),
            &[p],
            &[StepRate::Scalar(alpha)],
            first_order,
        )
        .unwrap();
        let outer = adapted[0].square().unwrap();
        let g = tape.grad(outer, &[p], false).unwrap();
        (
            adapted[0].value().item().unwrap(),
            outer.value().item().unwrap(),
            g[0].value().item().unwrap(),
        )
    }

    fn fd_outer(theta: f64, alpha: f64, first_order: bool) -> f64 {
        // first-order: the inner gradient is frozen at the base point
        let h = 1e-5;
        let g0 = 2.0 * theta;
        let f = |t: f64| {
            let g = if first_order { g0 } else { 2.0 * t };
            let a = t - alpha * g;
            a * a
        };
        (f(theta + h) - f(theta - h)) / (2.0 * h)
    }

    #[test]
    fn second_order_scalar_case() {
        let (adapted, outer, g) = outer_grad(1.0, 0.1, false);
        assert!((adapted - 0.8).abs() < 1e-15);
        assert!((outer - 0.64).abs() < 1e-15);
        assert!((g - 1.28).abs() < 1e-12);
        assert!((g - fd_outer(1.0, 0.1, false)).abs() < 1e-8);
    }

    #[test]
    fn first_order_scalar_case() {
        let (_, _, g) = outer_grad(1.0, 0.1, true);
        assert!((g - 1.6).abs() < 1e-12);
        assert!((g - fd_outer(1.0, 0.1, true)).abs() < 1e-8);
    }

    #[test]
    fn zero_step_is_plain_gradient() {
        let (adapted, _, g) = outer_grad(1.0, 0.0, false);
        assert_eq!(adapted, 1.0);
        assert_eq!(g, 2.0);
    }

    #[test]
    fn detached_grads_rejected_in_second_order() {
        let tape = Tape::new();
        let p = tape.var(Tensor::scalar(1.0));
        let loss = p.square().unwrap();
        let g = tape.grad(loss, &[p], false).unwrap();
        let err = grad_through_update(&[p], &g, &[StepRate::Scalar(0.1)], false).unwrap_err();
        assert!(matches!(err, Error::DetachedInnerGrad { index: 0 }));
        assert!(grad_through_update(&[p], &g, &[StepRate::Scalar(0.1)], true).is_ok());
    }

    #[test]
    fn per_element_rate_matches_scalar_bitwise() {
        let tape = Tape::new();
        let p = tape.var(Tensor::vector(vec![0.3, -1.7, 2.2]));
        let rate = tape.var(Tensor::full(&[3], 0.01));
        let g = tape.grad(p.sin().unwrap().sum().unwrap(), &[p], true).unwrap();
        let a = grad_through_update(&[p], &g, &[StepRate::Scalar(0.01)], false).unwrap();
        let b = grad_through_update(&[p], &g, &[StepRate::PerElement(rate)], false).unwrap();
        assert!(a[0].value().bit_eq(&b[0].value()));
    }
}
