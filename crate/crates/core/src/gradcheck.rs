//! Central-difference verification of tape gradients.

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn eval_scalar<F>(f: &F, point: &Tensor) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let x = tape.constant(point.clone());
    let y = f(&mut tape, x)?;
    let v = tape.value(y);
    if v.len() != 1 {
        return Err(Error::Shape(format!(
            "grad_check needs a scalar function, got shape {:?}",
            v.shape()
        )));
    }
    Ok(v.data()[0])
}

/// Largest `|analytic - numeric| / max(1, |analytic|)` over all coordinates
/// of `point`, with the numeric derivative from central differences of step `h`.
pub fn grad_check<F>(f: F, point: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    if !(h > 0.0) {
        return Err(Error::Precondition(format!(
            "step must be positive, got {h}"
        )));
    }
    let mut tape = Tape::new();
    let x = tape.leaf(point.clone(), true);
    let y = f(&mut tape, x)?;
    if tape.value(y).len() != 1 {
        return Err(Error::Shape(format!(
            "grad_check needs a scalar function, got shape {:?}",
            tape.value(y).shape()
        )));
    }
    tape.backward(y, &Tensor::full(tape.value(y).shape(), 1.0))?;
    let analytic = tape
        .grad(x)
        .map(<[f64]>::to_vec)
        .unwrap_or_else(|| vec![0.0; point.len()]);

    let mut worst = 0.0f64;
    let mut probe = point.clone();
    for i in 0..point.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = eval_scalar(&f, &probe)?;
        probe.data_mut()[i] = orig - h;
        let down = eval_scalar(&f, &probe)?;
        probe.data_mut()[i] = orig;
        let numeric = (up - down) / (2.0 * h);
        let a = analytic[i];
        if !numeric.is_finite() || !a.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite derivative at coordinate {i}: analytic {a}, numeric {numeric}"
            )));
        }
        worst = worst.max((a - numeric).abs() / a.abs().max(1.0));
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_has_exact_gradient() {
        let p = Tensor::new(vec![5], vec![0.1, -2.0, 3.5, 7.0, -0.25]).unwrap();
        let err = grad_check(|t, x| Ok(t.sum(x)), &p, 1e-5).unwrap();
        assert!(err < 1e-10, "{err}");
    }

    #[test]
    fn rejects_bad_step_and_non_scalar() {
        let p = Tensor::new(vec![2], vec![1.0, 2.0]).unwrap();
        assert!(grad_check(|t, x| Ok(t.sum(x)), &p, 0.0).is_err());
        assert!(matches!(
            grad_check(|t, x| Ok(t.relu(x)), &p, 1e-5),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn reports_non_finite_values() {
        let p = Tensor::new(vec![1], vec![1e308]).unwrap();
        let r = grad_check(|t, x| Ok(t.affine(x, 10.0, 0.0)), &p, 1e300);
        assert!(matches!(r, Err(Error::Numeric(_))));
    }
}
