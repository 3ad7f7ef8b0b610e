use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{NepError, Result};
use crate::nn::Real;

/// AdamW hyper-parameters. Defaults are the betas and constant rate the method trains with.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self { lr: 1e-4, beta1: 0.9, beta2: 0.95, eps: 1e-8, weight_decay: 0.0 }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && self.eps > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.weight_decay >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(NepError::Config(format!("invalid optimizer config {self:?}")))
        }
    }
}

/// First and second moment buffers.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        Self { m: vec![0.0; n], v: vec![0.0; n] }
    }
}

/// One bias-corrected AdamW update with decoupled weight decay, at step `t >= 1`.
pub fn adamw_step<T: Real>(
    params: &mut [T],
    grads: &[T],
    state: &mut AdamState,
    cfg: &OptimizerConfig,
    t: u64,
) {
    let all = [0..params.len()];
    adamw_step_ranges(params, grads, state, cfg, t, &all);
}

/// [`adamw_step`] restricted to the element ranges in `trainable`; everything else is left untouched.
pub fn adamw_step_ranges<T: Real>(
    params: &mut [T],
    grads: &[T],
    state: &mut AdamState,
    cfg: &OptimizerConfig,
    t: u64,
    trainable: &[Range<usize>],
) {
    assert_eq!(params.len(), grads.len(), "adamw: grads extent");
    assert!(t >= 1, "adamw: steps count from 1");
    if state.m.len() != params.len() {
        *state = AdamState::new(params.len());
    }
    let bc1 = 1.0 - cfg.beta1.powi(t as i32);
    let bc2 = 1.0 - cfg.beta2.powi(t as i32);
    for r in trainable {
        for i in r.clone() {
            let g = grads[i].f64();
            let m = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * g;
            let v = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * g * g;
            state.m[i] = m;
            state.v[i] = v;
            let mut p = params[i].f64();
            p -= cfg.lr * cfg.weight_decay * p;
            p -= cfg.lr * (m / bc1) / ((v / bc2).sqrt() + cfg.eps);
            params[i] = T::of(p);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_the_training_recipe() {
        let c = OptimizerConfig::default();
        assert_eq!((c.beta1, c.beta2, c.lr), (0.9, 0.95, 1e-4));
        c.validate().unwrap();
    }

    #[test]
    fn zero_gradient_without_decay_leaves_params() {
        let mut p = vec![0.5f32, -1.25, 3.0];
        let before = p.clone();
        let mut s = AdamState::new(3);
        adamw_step(&mut p, &[0.0; 3], &mut s, &OptimizerConfig::default(), 1);
        assert_eq!(p, before);
    }

    #[test]
    fn single_step_matches_hand_calculation() {
        // m = 0.1, v = 0.05; bias correction makes both 1, so w = 1 - 0.1 * 1 / (1 + 1e-8).
        let cfg = OptimizerConfig { lr: 0.1, ..Default::default() };
        let mut p = vec![1.0f64];
        let mut s = AdamState::new(1);
        adamw_step(&mut p, &[1.0], &mut s, &cfg, 1);
        let want = 1.0 - 0.1 / (1.0 + 1e-8);
        assert!((p[0] - want).abs() < 1e-15, "{}", p[0]);
        assert!((s.m[0] - 0.1).abs() < 1e-15 && (s.v[0] - 0.05).abs() < 1e-15);
    }

    #[test]
    fn frozen_ranges_are_untouched() {
        let cfg = OptimizerConfig { lr: 0.1, weight_decay: 0.1, ..Default::default() };
        let mut p = vec![1.0f32; 4];
        let mut s = AdamState::new(4);
        adamw_step_ranges(&mut p, &[1.0; 4], &mut s, &cfg, 1, &[2..4]);
        assert_eq!(&p[..2], &[1.0, 1.0]);
        assert!(p[2] < 1.0 && p[3] < 1.0);
    }

    #[test]
    fn invalid_betas_rejected() {
        let cfg = OptimizerConfig { beta2: 1.0, ..Default::default() };
        assert!(cfg.validate().is_err());
    }
}
