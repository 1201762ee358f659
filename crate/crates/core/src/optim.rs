//! Adam with bias correction.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates, one buffer per parameter.
#[derive(Debug, Clone, Default)]
pub struct AdamState {
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn step(&self) -> u64 {
        self.step
    }
}

/// Apply one Adam update in place. A non-finite gradient aborts the step
/// before any parameter or moment changes.
pub fn adam_step(
    params: &mut ParamStore,
    grads: &[Tensor],
    state: &mut AdamState,
    cfg: &AdamConfig,
) -> Result<()> {
    if grads.len() != params.len() {
        return Err(Error::Contract(format!(
            "{} gradients for {} parameters",
            grads.len(),
            params.len()
        )));
    }
    for (p, g) in params.iter().zip(grads) {
        if p.value.shape() != g.shape() {
            return Err(Error::dim(format!(
                "gradient {:?} for parameter `{}` of shape {:?}",
                g.shape(),
                p.name,
                p.value.shape()
            )));
        }
        if !g.all_finite() {
            return Err(Error::Numeric(format!(
                "non-finite gradient for parameter `{}`",
                p.name
            )));
        }
    }
    if state.m.is_empty() {
        state.m = params.iter().map(|p| vec![0.0; p.value.len()]).collect();
        state.v = state.m.clone();
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for (((p, g), m), v) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut())
        .zip(state.v.iter_mut())
    {
        let w = p.value.data_mut();
        for i in 0..w.len() {
            let gi = g.data()[i];
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * gi;
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * gi * gi;
            let mhat = m[i] / bc1;
            let vhat = v[i] / bc2;
            w[i] -= cfg.lr * mhat / (vhat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Init;

    fn scalar_store(x: f64) -> ParamStore {
        let mut s = ParamStore::new(0);
        let id = s.add("x", &[1], Init::Zeros).unwrap();
        s.get_mut(id).value = Tensor::scalar(x);
        s
    }

    fn x_of(s: &ParamStore) -> f64 {
        s.iter().next().unwrap().value.item()
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut s = scalar_store(1.5);
        let mut st = AdamState::new();
        for _ in 0..5 {
            adam_step(&mut s, &[Tensor::scalar(0.0)], &mut st, &AdamConfig::default()).unwrap();
        }
        assert_eq!(x_of(&s), 1.5);
    }

    #[test]
    fn first_step_moves_by_lr() {
        // m̂ = g, v̂ = g², so the step is lr·g/(|g|+eps) ≈ lr.
        let mut s = scalar_store(0.0);
        let mut st = AdamState::new();
        let cfg = AdamConfig {
            lr: 0.1,
            ..Default::default()
        };
        adam_step(&mut s, &[Tensor::scalar(2.5)], &mut st, &cfg).unwrap();
        let expected = -0.1 * 2.5 / (2.5 + 1e-8);
        assert!((x_of(&s) - expected).abs() < 1e-15);
        assert!((x_of(&s) + 0.1).abs() < 1e-8);
    }

    #[test]
    fn converges_on_quadratic() {
        let mut s = scalar_store(0.0);
        let mut st = AdamState::new();
        let cfg = AdamConfig {
            lr: 0.1,
            ..Default::default()
        };
        for _ in 0..200 {
            let x = x_of(&s);
            adam_step(&mut s, &[Tensor::scalar(2.0 * (x - 5.0))], &mut st, &cfg).unwrap();
        }
        assert!((x_of(&s) - 5.0).abs() < 0.1, "x = {}", x_of(&s));
    }

    #[test]
    fn non_finite_gradient_aborts_and_names_parameter() {
        let mut s = scalar_store(1.0);
        let mut st = AdamState::new();
        let err = adam_step(&mut s, &[Tensor::scalar(f64::NAN)], &mut st, &AdamConfig::default())
            .unwrap_err();
        assert!(err.to_string().contains("`x`"));
        assert_eq!(x_of(&s), 1.0);
        assert_eq!(st.step(), 0);
    }
}
