//! Finite-difference gradient oracle used to validate backward passes.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Central finite differences of a scalar function of a tensor:
/// `(f(x + h e_i) - f(x - h e_i)) / (2h)` per coordinate.
#[allow(clippy::needless_range_loop)]
pub fn finite_difference_gradient(
    f: &mut dyn FnMut(&Tensor) -> Result<f64>,
    x: &Tensor,
    h: f64,
) -> Result<Tensor> {
    if h <= 0.0 {
        return Err(Error::Config(format!("finite differences need h > 0, got {h}")));
    }
    let mut grad = vec![0.0; x.numel()];
    let mut probe = x.clone();
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let fp = f(&probe)?;
        probe.data_mut()[i] = orig - h;
        let fm = f(&probe)?;
        probe.data_mut()[i] = orig;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::Numerical {
                op: "finite_difference_gradient",
            });
        }
        grad[i] = (fp - fm) / (2.0 * h);
    }
    Ok(Tensor::from_parts(x.shape().to_vec(), grad))
}

/// Largest elementwise relative error between two gradients, with an
/// absolute floor of 1 in the denominator so near-zero entries compare
/// absolutely.
pub fn max_relative_error(a: &Tensor, b: &Tensor) -> f64 {
    assert_eq!(a.shape(), b.shape(), "gradient shapes must match");
    a.data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (x - y).abs() / x.abs().max(y.abs()).max(1.0))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_is_recovered() {
        let x = Tensor::scalar(3.0);
        let g = finite_difference_gradient(
            &mut |t| Ok(t.data()[0] * t.data()[0]),
            &x,
            1e-5,
        )
        .unwrap();
        assert!((g.item().unwrap() - 6.0).abs() < 1e-6);
    }

    #[test]
    fn linear_gives_all_ones() {
        let x = Tensor::vector(&[0.3, -1.2, 7.0]);
        let g =
            finite_difference_gradient(&mut |t| Ok(t.data().iter().sum()), &x, 1e-5).unwrap();
        for &v in g.data() {
            assert!((v - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn exponential_at_zero() {
        let x = Tensor::scalar(0.0);
        let g = finite_difference_gradient(&mut |t| Ok(t.data()[0].exp()), &x, 1e-5).unwrap();
        assert!((g.item().unwrap() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn non_finite_evaluation_errors() {
        let x = Tensor::scalar(0.0);
        let r = finite_difference_gradient(&mut |t| Ok(t.data()[0].ln()), &x, 1e-5);
        assert!(r.is_err());
    }

    #[test]
    fn nonpositive_step_rejected() {
        let x = Tensor::scalar(1.0);
        assert!(finite_difference_gradient(&mut |t| Ok(t.data()[0]), &x, 0.0).is_err());
    }
}
