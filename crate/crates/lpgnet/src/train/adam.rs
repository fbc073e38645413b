//! Bias-corrected Adam with coupled L2 regularization.

use crate::error::{LpgError, Result};
use crate::tensor::gradcheck::ParamSet;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// L2 strength added to the gradient (coupled form)
    pub weight_decay: f64,
}

impl AdamConfig {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        AdamConfig { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay }
    }
}

/// First/second moment estimates per parameter tensor, plus the step count.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct AdamState {
    m: HashMap<String, Vec<f64>>,
    v: HashMap<String, Vec<f64>>,
    pub step: usize,
}

impl AdamState {
    pub fn new() -> Self {
        Self::default()
    }

    /// One update over the named parameters. Gradients are read from each
    /// tensor's grad buffer (absent means zero) and left untouched.
    pub fn step<P: ParamSet + ?Sized>(
        &mut self,
        params: &mut P,
        names: &[String],
        cfg: &AdamConfig,
    ) -> Result<()> {
        self.step += 1;
        let t = self.step as f64;
        let bc1 = 1.0 - cfg.beta1.powf(t);
        let bc2 = 1.0 - cfg.beta2.powf(t);
        for name in names {
            let len = params.param(name).numel();
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; len]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; len]);
            if m.len() != len {
                return Err(LpgError::contract(format!(
                    "adam state for '{name}' has {} entries, parameter has {len}",
                    m.len()
                )));
            }
            let tensor = params.param_mut(name);
            if let Some(g) = &tensor.grad {
                if g.len() != len {
                    return Err(LpgError::contract(format!(
                        "gradient for '{name}' has {} entries, parameter has {len}",
                        g.len()
                    )));
                }
            }
            for i in 0..len {
                let mut g = tensor.grad.as_ref().map(|g| g[i]).unwrap_or(0.0);
                g += cfg.weight_decay * tensor.data[i];
                m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
                v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                tensor.data[i] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck::ParamVec;
    use crate::tensor::Tensor;

    fn one_param(value: f64, grad: f64) -> ParamVec {
        let mut t = Tensor::from_vec(vec![1], vec![value]).unwrap();
        t.requires_grad = true;
        t.grad = Some(vec![grad]);
        let mut p = ParamVec { entries: Vec::new() };
        p.push("x", t);
        p
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut p = one_param(1.0, 1.0);
        let names = vec!["x".to_string()];
        let cfg = AdamConfig::new(0.1, 0.0);
        let mut state = AdamState::new();
        state.step(&mut p, &names, &cfg).unwrap();
        // bias correction makes m̂ = v̂^(1/2) = 1 on the first step
        let got = p.entries[0].1.data[0];
        assert!((got - (1.0 - 0.1)).abs() < 1e-9, "got {got}");
    }

    #[test]
    fn zero_gradient_without_decay_is_a_fixed_point() {
        let mut p = one_param(0.7, 0.0);
        let names = vec!["x".to_string()];
        let cfg = AdamConfig::new(0.1, 0.0);
        let mut state = AdamState::new();
        for _ in 0..5 {
            state.step(&mut p, &names, &cfg).unwrap();
        }
        assert_eq!(p.entries[0].1.data[0], 0.7);
    }

    #[test]
    fn three_step_trace_matches_scalar_oracle() {
        // independent scalar Adam with coupled L2, run by hand
        let (lr, b1, b2, eps, wd) = (0.01, 0.9, 0.999, 1e-8, 0.1);
        let grads = [0.3, -0.7, 1.1];
        let mut theta: f64 = 0.5;
        let (mut m, mut v) = (0.0f64, 0.0f64);
        let mut expected = Vec::new();
        for (t, g0) in grads.iter().enumerate() {
            let g = g0 + wd * theta;
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mh = m / (1.0 - b1.powi(t as i32 + 1));
            let vh = v / (1.0 - b2.powi(t as i32 + 1));
            theta -= lr * mh / (vh.sqrt() + eps);
            expected.push(theta);
        }

        let mut p = one_param(0.5, 0.0);
        let names = vec!["x".to_string()];
        let cfg = AdamConfig { lr, beta1: b1, beta2: b2, eps, weight_decay: wd };
        let mut state = AdamState::new();
        for (g, want) in grads.iter().zip(&expected) {
            p.entries[0].1.grad = Some(vec![*g]);
            state.step(&mut p, &names, &cfg).unwrap();
            let got = p.entries[0].1.data[0];
            assert!((got - want).abs() < 1e-12, "got {got}, want {want}");
        }
    }

    #[test]
    fn stale_state_shape_is_contract_error() {
        let mut p = one_param(1.0, 1.0);
        let names = vec!["x".to_string()];
        let cfg = AdamConfig::new(0.1, 0.0);
        let mut state = AdamState::new();
        state.step(&mut p, &names, &cfg).unwrap();
        p.entries[0].1 = Tensor::from_vec(vec![2], vec![0.0, 0.0]).unwrap();
        p.entries[0].1.grad = Some(vec![1.0, 1.0]);
        assert!(state.step(&mut p, &names, &cfg).is_err());
    }
}
