//! AdamW and the warmup/linear-decay learning-rate schedule.

use serde::{Deserialize, Serialize};

use super::TrainError;
use crate::autodiff::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// Moment estimates for one parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub config: AdamConfig,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(config: AdamConfig, len: usize) -> Self {
        Self {
            config,
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
        }
    }
}

/// One AdamW update. Weight decay is decoupled and applied before the moment
/// update; moments are bias-corrected.
pub fn adam_step(params: &mut [f64], grads: &Tensor, state: &mut OptimizerState, lr: f64) -> Result<(), TrainError> {
    let g = grads.data();
    if g.len() != params.len() || state.m.len() != params.len() {
        return Err(TrainError::Config(format!(
            "optimizer shapes differ: {} params, {} grads, {} moments",
            params.len(),
            g.len(),
            state.m.len()
        )));
    }
    if let Some(i) = g.iter().position(|x| !x.is_finite()) {
        return Err(TrainError::Numerical(format!(
            "non-finite gradient at coordinate {i} on optimizer step {}",
            state.step + 1
        )));
    }
    let AdamConfig {
        beta1,
        beta2,
        eps,
        weight_decay,
    } = state.config;
    state.step += 1;
    let c1 = 1.0 - beta1.powi(state.step as i32);
    let c2 = 1.0 - beta2.powi(state.step as i32);
    for i in 0..params.len() {
        params[i] -= lr * weight_decay * params[i];
        state.m[i] = beta1 * state.m[i] + (1.0 - beta1) * g[i];
        state.v[i] = beta2 * state.v[i] + (1.0 - beta2) * g[i] * g[i];
        let m_hat = state.m[i] / c1;
        let v_hat = state.v[i] / c2;
        params[i] -= lr * m_hat / (v_hat.sqrt() + eps);
    }
    Ok(())
}

/// Linear warmup from 0 to `lr_peak` over the first `warmup_frac` of the
/// steps, then linear decay to 0 at `total_steps`.
pub fn lr_at_step(step: usize, total_steps: usize, lr_peak: f64, warmup_frac: f64) -> f64 {
    if total_steps == 0 {
        return 0.0;
    }
    let step = step.min(total_steps) as f64;
    let total = total_steps as f64;
    let warmup = warmup_frac * total;
    if step < warmup {
        lr_peak * step / warmup
    } else if warmup >= total {
        lr_peak
    } else {
        lr_peak * (total - step) / (total - warmup)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grads(values: &[f64]) -> Tensor {
        Tensor::new(1, values.len(), values.to_vec()).unwrap()
    }

    #[test]
    fn zero_gradient_without_decay_is_identity() {
        let cfg = AdamConfig {
            weight_decay: 0.0,
            ..AdamConfig::default()
        };
        let mut p = vec![0.3, -1.2];
        let mut st = OptimizerState::new(cfg, 2);
        for _ in 0..3 {
            adam_step(&mut p, &grads(&[0.0, 0.0]), &mut st, 0.1).unwrap();
        }
        assert_eq!(p, vec![0.3, -1.2]);
    }

    #[test]
    fn first_step_by_hand() {
        // m = 0.1 g, v = 0.001 g^2; bias-corrected m_hat = g, v_hat = g^2
        let cfg = AdamConfig {
            weight_decay: 0.0,
            ..AdamConfig::default()
        };
        let (p0, g, lr) = (1.0, 0.5, 0.01);
        let mut p = vec![p0];
        let mut st = OptimizerState::new(cfg, 1);
        adam_step(&mut p, &grads(&[g]), &mut st, lr).unwrap();
        let m_hat = (0.1 * g) / 0.1;
        let v_hat = (0.001 * g * g) / (1.0 - 0.999);
        let expect = p0 - lr * m_hat / (v_hat.sqrt() + 1e-8);
        assert!((p[0] - expect).abs() < 1e-15);
        assert!((p[0] - (p0 - lr * g / (g + 1e-8))).abs() < 1e-12);
        assert!((st.m[0] - 0.05).abs() < 1e-15);
        assert!((st.v[0] - 0.00025).abs() < 1e-15);
    }

    #[test]
    fn decay_precedes_moment_update() {
        let mut p = vec![2.0];
        let mut st = OptimizerState::new(AdamConfig::default(), 1);
        adam_step(&mut p, &grads(&[0.0]), &mut st, 0.1).unwrap();
        assert!((p[0] - 2.0 * (1.0 - 0.1 * 0.01)).abs() < 1e-15);
    }

    #[test]
    fn rejects_non_finite() {
        let mut p = vec![0.0];
        let mut st = OptimizerState::new(AdamConfig::default(), 1);
        let bad = Tensor::from_parts(1, 1, vec![f64::NAN]);
        assert!(matches!(adam_step(&mut p, &bad, &mut st, 0.1), Err(TrainError::Numerical(_))));
    }

    #[test]
    fn deterministic() {
        let run = || {
            let mut p = vec![0.1, 0.2, 0.3];
            let mut st = OptimizerState::new(AdamConfig::default(), 3);
            for i in 0..5 {
                let g = grads(&[0.1 * i as f64, -0.3, 0.7]);
                adam_step(&mut p, &g, &mut st, 0.01).unwrap();
            }
            p
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn schedule_shape() {
        let (peak, total) = (3e-3, 100);
        assert_eq!(lr_at_step(0, total, peak, 0.1), 0.0);
        assert_eq!(lr_at_step(10, total, peak, 0.1), peak);
        assert_eq!(lr_at_step(total, total, peak, 0.1), 0.0);
        assert!((lr_at_step(5, total, peak, 0.1) - peak / 2.0).abs() < 1e-18);
        assert!((lr_at_step(55, total, peak, 0.1) - peak / 2.0).abs() < 1e-18);
        assert_eq!(lr_at_step(0, total, peak, 0.0), peak);
        for s in 1..total {
            let lr = lr_at_step(s, total, peak, 0.1);
            assert!(lr > 0.0 && lr <= peak);
        }
    }
}
