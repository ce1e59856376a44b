// SPDX-License-Identifier: MIT OR Apache-2.0

use super::{Tape, Tensor, Var};
use crate::error::{LabError, Result};

/// Compares tape gradients of a scalar function against central differences.
///
/// `f` receives a fresh tape and the input variable and must return a scalar
/// node. The result is the largest per-coordinate relative error
/// `|analytic - numeric| / (|analytic| + |numeric| + 1e-8)`.
pub fn grad_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    if !(h > 0.0) {
        return Err(LabError::InvalidArgument("step must be > 0".into()));
    }
    let eval = |point: &Tensor| -> Result<f64> {
        let mut tape = Tape::new();
        let v = tape.constant(point.clone());
        let out = f(&mut tape, v)?;
        Ok(tape.value(out).data()[0])
    };

    let mut tape = Tape::new();
    let v = tape.param(x.clone());
    let out = f(&mut tape, v)?;
    let f0 = tape.value(out).data()[0];
    if !f0.is_finite() {
        return Err(LabError::NonFinite(format!("f(x) = {f0}")));
    }
    let grads = tape.backward(out)?;
    let zeros = vec![0.0; x.len()];
    let analytic = grads.get(v).unwrap_or(&zeros);

    let mut worst: f64 = 0.0;
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = eval(&probe)?;
        probe.data_mut()[i] = orig - h;
        let down = eval(&probe)?;
        probe.data_mut()[i] = orig;
        let numeric = (up - down) / (2.0 * h);
        let err = (analytic[i] - numeric).abs() / (analytic[i].abs() + numeric.abs() + 1e-8);
        worst = worst.max(err);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares() {
        let x = Tensor::vector(vec![1.0, 2.0, 3.0]).unwrap();
        let err = grad_check(
            |t, v| {
                let sq = t.mul(v, v)?;
                Ok(t.sum(sq))
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-6, "{err}");
    }

    #[test]
    fn constant_function() {
        let x = Tensor::vector(vec![0.3, -1.2]).unwrap();
        let err = grad_check(
            |t, _| Ok(t.constant(Tensor::scalar(4.0))),
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-8);
    }

    #[test]
    fn non_finite_output_is_rejected() {
        let x = Tensor::vector(vec![1.0]).unwrap();
        let r = grad_check(|t, _| Ok(t.constant(Tensor::scalar(f64::NAN))), &x, 1e-5);
        assert!(matches!(r, Err(LabError::NonFinite(_))));
    }
}
