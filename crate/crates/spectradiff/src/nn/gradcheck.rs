//! Finite-difference gradient checking utilities.
//!
//! These helpers only drive forward passes, so they stay independent of the
//! hand-written backward code they are used to verify. They live in the crate
//! (rather than a test file) because both the unit suites and the acceptance
//! suite check gradients with them.

use crate::nn::params::ParamStore;
use crate::nn::tensor::TensorND;

/// Default central-difference step.
pub const FD_STEP: f64 = 1e-4;

/// Default relative tolerance for comparing analytic vs numeric gradients.
pub const FD_REL_TOL: f64 = 1e-3;

/// Central finite-difference gradient of `f` at `x`.
pub fn finite_diff_tensor(x: &TensorND, step: f64, mut f: impl FnMut(&TensorND) -> f64) -> TensorND {
    let mut probe = x.clone();
    let mut grad = TensorND::zeros(x.shape());
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + step;
        let plus = f(&probe);
        probe.data_mut()[i] = orig - step;
        let minus = f(&probe);
        probe.data_mut()[i] = orig;
        grad.data_mut()[i] = (plus - minus) / (2.0 * step);
    }
    grad
}

/// Central finite-difference gradient of a scalar loss w.r.t. one named
/// parameter, perturbing it inside the store.
pub fn finite_diff_param(
    ps: &mut ParamStore,
    path: &str,
    step: f64,
    mut loss: impl FnMut(&ParamStore) -> f64,
) -> TensorND {
    let n = ps.value(path).len();
    let mut grad = TensorND::zeros(ps.value(path).shape());
    for i in 0..n {
        let orig = ps.value(path).data()[i];
        ps.value_mut(path).data_mut()[i] = orig + step;
        let plus = loss(ps);
        ps.value_mut(path).data_mut()[i] = orig - step;
        let minus = loss(ps);
        ps.value_mut(path).data_mut()[i] = orig;
        grad.data_mut()[i] = (plus - minus) / (2.0 * step);
    }
    grad
}

/// Largest relative discrepancy between analytic and numeric gradients.
///
/// The denominator is floored at 1e-4 so that near-zero entries are compared
/// absolutely rather than blowing up the ratio.
pub fn max_rel_error(analytic: &TensorND, numeric: &TensorND) -> f64 {
    assert_eq!(analytic.shape(), numeric.shape(), "gradient shape mismatch");
    analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-4))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn finite_diff_matches_quadratic() {
        let x = TensorND::from_vec(&[3], vec![1.0, -2.0, 0.5]).unwrap();
        let fd = finite_diff_tensor(&x, FD_STEP, |t| t.data().iter().map(|v| v * v).sum());
        let analytic = x.map(|v| 2.0 * v);
        assert!(max_rel_error(&analytic, &fd) < 1e-8);
    }
}
