//! Central-difference verification of analytic gradients.

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Largest `|analytic − numeric| / max(1, |analytic|)` over all coordinates
/// of `x`.
///
/// `f` returns the scalar value at a point together with its analytic
/// gradient (same element count as the point). The numeric estimate is
/// `(f(x + h·eᵢ) − f(x − h·eᵢ)) / 2h`.
pub fn grad_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&Tensor) -> Result<(f64, Tensor)>,
{
    if !(1e-7..=1e-3).contains(&h) {
        return Err(Error::arg(format!("step {h} outside [1e-7, 1e-3]")));
    }
    let (value, analytic) = f(x)?;
    if !value.is_finite() {
        return Err(Error::Evaluation(format!("f(x) = {value}")));
    }
    if analytic.len() != x.len() {
        return Err(Error::dim("grad_check", x.shape(), analytic.shape()));
    }
    let mut probe = x.detached();
    let mut worst = 0.0_f64;
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let plus = f(&probe)?.0;
        probe.data_mut()[i] = orig - h;
        let minus = f(&probe)?.0;
        probe.data_mut()[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::Evaluation(format!("f(x ± h) at coordinate {i}")));
        }
        let numeric = (plus - minus) / (2.0 * h);
        let a = analytic.data()[i];
        worst = worst.max((a - numeric).abs() / a.abs().max(1.0));
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sum_sq(x: &Tensor) -> Result<(f64, Tensor)> {
        let v = x.data().iter().map(|a| a * a).sum();
        Ok((v, x.map(|a| 2.0 * a)))
    }

    #[test]
    fn quadratic_is_exact() {
        let x = Tensor::vector(vec![0.3, -1.7, 4.2, 10.0]);
        assert!(grad_check(sum_sq, &x, 1e-4).unwrap() <= 1e-8);
    }

    #[test]
    fn detects_wrong_gradient() {
        let x = Tensor::vector(vec![1.0, 2.0]);
        let bad = |x: &Tensor| sum_sq(x).map(|(v, g)| (v, g.map(|a| a * 1.1)));
        assert!(grad_check(bad, &x, 1e-5).unwrap() > 0.05);
    }

    #[test]
    fn step_range_enforced() {
        let x = Tensor::scalar(1.0);
        assert!(grad_check(sum_sq, &x, 1e-2).is_err());
        assert!(grad_check(sum_sq, &x, 1e-9).is_err());
    }

    #[test]
    fn non_finite_value_is_an_evaluation_error() {
        let x = Tensor::scalar(1.0);
        let f = |x: &Tensor| Ok((f64::NAN, x.clone()));
        assert!(matches!(grad_check(f, &x, 1e-5), Err(Error::Evaluation(_))));
    }
}
