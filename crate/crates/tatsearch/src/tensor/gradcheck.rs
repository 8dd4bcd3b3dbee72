//! Finite-difference verification of analytic gradients.

use crate::error::{Error, Result};
use crate::tensor::ParamSet;

pub const GRAD_CHECK_STEP: f64 = 1e-4;

/// Compares the gradients stored in `params` against central differences of
/// `loss`, perturbing every scalar parameter by ±h in turn.
///
/// Returns the largest symmetric relative error
/// |analytic - central| / max(|analytic| + |central|, 1e-8),
/// so a gradient off by a factor of two reports ~= 1/3.
///
/// The caller must have filled `params` gradients (one backward pass) before
/// calling; `loss` itself must not touch them.
pub fn grad_check<F>(mut loss: F, params: &mut ParamSet, h: f64) -> Result<f64>
where
    F: FnMut(&ParamSet) -> Result<f64>,
{
    if h <= 0.0 {
        return Err(Error::Config(format!("grad_check step must be positive, got {h}")));
    }
    let analytic: Vec<Vec<f64>> = params.iter().map(|p| p.grad.data().to_vec()).collect();

    let mut max_rel = 0.0f64;
    for pi in 0..params.len() {
        for si in 0..analytic[pi].len() {
            let original = params.params[pi].value.data()[si];
            params.params[pi].value.data_mut()[si] = original + h;
            let plus = loss(params)?;
            params.params[pi].value.data_mut()[si] = original - h;
            let minus = loss(params)?;
            params.params[pi].value.data_mut()[si] = original;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite loss during finite differences (f+={plus}, f-={minus})"
                )));
            }
            let central = (plus - minus) / (2.0 * h);
            let a = analytic[pi][si];
            let rel = (a - central).abs() / (a.abs() + central.abs()).max(1e-8);
            if rel > max_rel {
                max_rel = rel;
            }
        }
    }
    Ok(max_rel)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn quadratic_gradient_matches() {
        // f(x) = x^2 at x = 3: analytic gradient 6.
        let mut ps = ParamSet::new();
        let id = ps.insert("x", Tensor::from_slice(&[3.0])).unwrap();
        ps.grad_mut(id).data_mut()[0] = 6.0;
        let err = grad_check(|p| Ok(p.value(id).data()[0].powi(2)), &mut ps, 1e-4).unwrap();
        assert!(err <= 1e-8, "relative error {err}");
    }

    #[test]
    fn doubled_gradient_is_flagged() {
        let mut ps = ParamSet::new();
        let id = ps.insert("x", Tensor::from_slice(&[3.0])).unwrap();
        ps.grad_mut(id).data_mut()[0] = 12.0; // deliberately wrong by 2x
        let err = grad_check(|p| Ok(p.value(id).data()[0].powi(2)), &mut ps, 1e-4).unwrap();
        assert!((err - 1.0 / 3.0).abs() < 1e-6, "expected ~0.333, got {err}");
    }

    #[test]
    fn non_finite_loss_is_an_error() {
        let mut ps = ParamSet::new();
        ps.insert("x", Tensor::from_slice(&[0.0])).unwrap();
        let res = grad_check(|_| Ok(f64::NAN), &mut ps, 1e-4);
        assert!(matches!(res, Err(Error::Numeric(_))));
    }
}
