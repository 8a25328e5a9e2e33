//! Central finite-difference gradient checking.
//!
//! Used by the test suites to validate reverse-mode gradients against an
//! independent numerical oracle, and exposed publicly so integration tests can
//! sweep model parameters the same way.

/// Central-difference gradient of `f` at `x`: (f(x+h e_i) - f(x-h e_i)) / 2h
/// for every coordinate.
pub fn fd_grad(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], step: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    let mut grad = vec![0.0; x.len()];
    for i in 0..x.len() {
        probe[i] = x[i] + step;
        let hi = f(&probe);
        probe[i] = x[i] - step;
        let lo = f(&probe);
        probe[i] = x[i];
        grad[i] = (hi - lo) / (2.0 * step);
    }
    grad
}

/// Like [`fd_grad`] but only for the listed coordinates; entries come back in
/// the same order as `indices`.
pub fn fd_grad_subset(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], indices: &[usize], step: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    let mut grad = Vec::with_capacity(indices.len());
    for &i in indices {
        probe[i] = x[i] + step;
        let hi = f(&probe);
        probe[i] = x[i] - step;
        let lo = f(&probe);
        probe[i] = x[i];
        grad.push((hi - lo) / (2.0 * step));
    }
    grad
}

/// Relative error |a-b| / max(|a|, |b|, 1): relative for large magnitudes,
/// absolute near zero so finite-difference noise on tiny gradients does not
/// dominate.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1.0)
}

/// Worst [`rel_err`] across two equally long gradient vectors.
pub fn max_rel_err(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "gradient length mismatch");
    a.iter().zip(b).map(|(&x, &y)| rel_err(x, y)).fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fd_matches_analytic_quadratic() {
        // f(x) = sum x_i^2, grad = 2x
        let x = [1.0, -2.0, 0.5];
        let g = fd_grad(|v| v.iter().map(|a| a * a).sum(), &x, 1e-5);
        for (gi, xi) in g.iter().zip(&x) {
            assert!(rel_err(*gi, 2.0 * xi) < 1e-9);
        }
    }

    #[test]
    fn subset_matches_full() {
        let x = [0.3, 0.7, -1.1, 2.0];
        let f = |v: &[f64]| v.iter().enumerate().map(|(i, a)| (i as f64 + 1.0) * a * a * a).sum();
        let full = fd_grad(f, &x, 1e-5);
        let sub = fd_grad_subset(f, &x, &[3, 1], 1e-5);
        assert_eq!(sub[0], full[3]);
        assert_eq!(sub[1], full[1]);
    }

    #[test]
    fn rel_err_is_absolute_near_zero() {
        assert!(rel_err(1e-9, 0.0) < 1e-8);
        assert!(rel_err(2.0, 1.0) > 0.3);
    }
}
