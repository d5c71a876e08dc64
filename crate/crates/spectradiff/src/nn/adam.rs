//! Adam optimizer with bias correction.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::nn::params::ParamStore;
use crate::nn::tensor::TensorND;

/// Optimizer state: hyperparameters plus per-parameter moment accumulators.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    step: u64,
    first_moment: BTreeMap<String, TensorND>,
    second_moment: BTreeMap<String, TensorND>,
}

impl AdamState {
    /// Defaults: betas 0.9/0.999, epsilon 1e-8.
    pub fn new(learning_rate: f64) -> Result<Self> {
        Self::with_hyperparams(learning_rate, 0.9, 0.999, 1e-8)
    }

    pub fn with_hyperparams(
        learning_rate: f64,
        beta1: f64,
        beta2: f64,
        epsilon: f64,
    ) -> Result<Self> {
        if !(learning_rate > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "learning rate must be positive, got {learning_rate}"
            )));
        }
        if !(0.0 < beta1 && beta1 < 1.0 && 0.0 < beta2 && beta2 < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "betas must lie in (0,1), got {beta1}/{beta2}"
            )));
        }
        Ok(AdamState {
            learning_rate,
            beta1,
            beta2,
            epsilon,
            step: 0,
            first_moment: BTreeMap::new(),
            second_moment: BTreeMap::new(),
        })
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// One Adam update over every parameter in the store.
///
/// Gradients are validated to be finite, consumed, and zeroed afterwards.
pub fn adam_step(state: &mut AdamState, params: &mut ParamStore) -> Result<()> {
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - state.beta1.powi(t);
    let bc2 = 1.0 - state.beta2.powi(t);
    for (path, param) in params.iter_mut() {
        if !param.grad.all_finite() {
            return Err(Error::Training(format!(
                "non-finite gradient for parameter {path}"
            )));
        }
        let m = state
            .first_moment
            .entry(path.to_string())
            .or_insert_with(|| TensorND::zeros(param.value.shape()));
        let v = state
            .second_moment
            .entry(path.to_string())
            .or_insert_with(|| TensorND::zeros(param.value.shape()));
        let md = m.data_mut();
        let vd = v.data_mut();
        let gd = param.grad.data();
        let pd = param.value.data_mut();
        for i in 0..gd.len() {
            let g = gd[i];
            md[i] = state.beta1 * md[i] + (1.0 - state.beta1) * g;
            vd[i] = state.beta2 * vd[i] + (1.0 - state.beta2) * g * g;
            let m_hat = md[i] / bc1;
            let v_hat = vd[i] / bc2;
            pd[i] -= state.learning_rate * m_hat / (v_hat.sqrt() + state.epsilon);
        }
        param.grad.fill(0.0);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::params::GradStore;

    fn store_with(path: &str, value: Vec<f64>) -> ParamStore {
        let mut ps = ParamStore::new();
        let n = value.len();
        ps.register(path, TensorND::from_vec(&[n], value).unwrap());
        ps
    }

    #[test]
    fn zero_gradient_is_a_noop_on_values() {
        let mut ps = store_with("w", vec![1.0, -2.0]);
        let mut adam = AdamState::new(1e-3).unwrap();
        adam_step(&mut adam, &mut ps).unwrap();
        assert_eq!(ps.value("w").data(), &[1.0, -2.0]);
        assert_eq!(adam.step_count(), 1);
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        // Bias-corrected first step: delta = -lr * g / (sqrt(g^2) + eps).
        let mut ps = store_with("w", vec![0.0]);
        let mut gs = GradStore::new();
        gs.accumulate("w", TensorND::from_vec(&[1], vec![0.37]).unwrap());
        ps.merge_grads(&gs).unwrap();
        let mut adam = AdamState::new(1e-3).unwrap();
        adam_step(&mut adam, &mut ps).unwrap();
        let expected = -1e-3 * 0.37 / (0.37f64.powi(2).sqrt() + 1e-8);
        assert!((ps.value("w").data()[0] - expected).abs() < 1e-6);
        assert!((ps.value("w").data()[0] + 1e-3).abs() < 1e-6);
        // Gradient zeroed after the step.
        assert_eq!(ps.grad("w").data(), &[0.0]);
    }

    #[test]
    fn equal_gradients_get_equal_updates() {
        let mut ps = ParamStore::new();
        ps.register("a", TensorND::from_vec(&[1], vec![1.0]).unwrap());
        ps.register("b", TensorND::from_vec(&[1], vec![1.0]).unwrap());
        let mut gs = GradStore::new();
        gs.accumulate("a", TensorND::from_vec(&[1], vec![0.5]).unwrap());
        gs.accumulate("b", TensorND::from_vec(&[1], vec![0.5]).unwrap());
        ps.merge_grads(&gs).unwrap();
        let mut adam = AdamState::new(1e-2).unwrap();
        adam_step(&mut adam, &mut ps).unwrap();
        assert_eq!(ps.value("a").data(), ps.value("b").data());
    }

    #[test]
    fn nan_gradient_names_the_parameter() {
        let mut ps = store_with("layer.weight", vec![1.0]);
        let mut gs = GradStore::new();
        gs.accumulate("layer.weight", TensorND::from_vec(&[1], vec![f64::NAN]).unwrap());
        ps.merge_grads(&gs).unwrap();
        let mut adam = AdamState::new(1e-3).unwrap();
        let err = adam_step(&mut adam, &mut ps).unwrap_err();
        assert!(err.to_string().contains("layer.weight"));
    }
}
