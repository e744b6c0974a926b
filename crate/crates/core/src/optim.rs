//! Stochastic gradient descent with momentum, and Adam.
//!
//! Weight decay is applied as a plain l2 term added to the gradient before
//! the update rule, for both optimizers.

use crate::error::{CoreError, Result};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OptimizerKind {
    SgdMomentum,
    Adam,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    pub momentum: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub epsilon: f64,
}

impl OptimizerConfig {
    pub fn adam(learning_rate: f64) -> Self {
        OptimizerConfig {
            kind: OptimizerKind::Adam,
            learning_rate,
            momentum: 0.9,
            beta1: 0.9,
            beta2: 0.999,
            weight_decay: 5e-4,
            epsilon: 1e-8,
        }
    }

    pub fn sgd_momentum(learning_rate: f64) -> Self {
        OptimizerConfig {
            kind: OptimizerKind::SgdMomentum,
            learning_rate,
            momentum: 0.9,
            beta1: 0.9,
            beta2: 0.999,
            weight_decay: 5e-4,
            epsilon: 1e-8,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.learning_rate < 0.0 || !self.learning_rate.is_finite() {
            return Err(CoreError::config("learning rate must be finite and non-negative"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(CoreError::config("adam betas must lie in [0, 1)"));
        }
        if self.momentum < 0.0 || self.momentum >= 1.0 {
            return Err(CoreError::config("momentum must lie in [0, 1)"));
        }
        if self.weight_decay < 0.0 {
            return Err(CoreError::config("weight decay must be non-negative"));
        }
        Ok(())
    }
}

enum Buffers {
    Sgd { velocity: Vec<Tensor> },
    Adam { first: Vec<Tensor>, second: Vec<Tensor> },
}

/// Per-parameter auxiliary state plus the update rule.
pub struct OptimizerState {
    config: OptimizerConfig,
    buffers: Buffers,
    step_count: u64,
}

impl OptimizerState {
    pub fn new(config: OptimizerConfig, params: &[Tensor]) -> Result<Self> {
        config.validate()?;
        let zeros: Vec<Tensor> = params.iter().map(Tensor::zeros_like).collect();
        let buffers = match config.kind {
            OptimizerKind::SgdMomentum => Buffers::Sgd { velocity: zeros },
            OptimizerKind::Adam => Buffers::Adam { first: zeros.clone(), second: zeros },
        };
        Ok(OptimizerState { config, buffers, step_count: 0 })
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.config
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// Apply one update in place. `grads` must align with `params` one-to-one.
    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor]) -> Result<()> {
        let count = match &self.buffers {
            Buffers::Sgd { velocity } => velocity.len(),
            Buffers::Adam { first, .. } => first.len(),
        };
        if params.len() != count || grads.len() != count {
            return Err(CoreError::shape(
                "optimizer_step",
                format!("state holds {} slots, got {} params / {} grads", count, params.len(), grads.len()),
            ));
        }
        for ((p, g), slot) in params.iter().zip(grads).zip(0..count) {
            if p.shape() != g.shape() {
                return Err(CoreError::shape(
                    "optimizer_step",
                    format!("slot {}: param {:?} vs grad {:?}", slot, p.shape(), g.shape()),
                ));
            }
        }

        self.step_count += 1;
        let cfg = self.config;
        match &mut self.buffers {
            Buffers::Sgd { velocity } => {
                for ((p, g), v) in params.iter_mut().zip(grads).zip(velocity.iter_mut()) {
                    let pv = p.values_mut();
                    let vv = v.values_mut();
                    for ((pe, &ge), ve) in pv.iter_mut().zip(g.values()).zip(vv.iter_mut()) {
                        let ge = ge + cfg.weight_decay * *pe;
                        *ve = cfg.momentum * *ve + ge;
                        *pe -= cfg.learning_rate * *ve;
                    }
                }
            }
            Buffers::Adam { first, second } => {
                let t = self.step_count as i32;
                let bc1 = 1.0 - cfg.beta1.powi(t);
                let bc2 = 1.0 - cfg.beta2.powi(t);
                for (((p, g), m), v) in
                    params.iter_mut().zip(grads).zip(first.iter_mut()).zip(second.iter_mut())
                {
                    let pv = p.values_mut();
                    for (((pe, &ge), me), ve) in
                        pv.iter_mut().zip(g.values()).zip(m.values_mut()).zip(v.values_mut())
                    {
                        let ge = ge + cfg.weight_decay * *pe;
                        *me = cfg.beta1 * *me + (1.0 - cfg.beta1) * ge;
                        *ve = cfg.beta2 * *ve + (1.0 - cfg.beta2) * ge * ge;
                        let m_hat = *me / bc1;
                        let v_hat = *ve / bc2;
                        *pe -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.epsilon);
                    }
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn plain_sgd(lr: f64) -> OptimizerConfig {
        OptimizerConfig {
            kind: OptimizerKind::SgdMomentum,
            learning_rate: lr,
            momentum: 0.0,
            beta1: 0.9,
            beta2: 0.999,
            weight_decay: 0.0,
            epsilon: 1e-8,
        }
    }

    #[test]
    fn sgd_without_momentum_subtracts_gradient() {
        let mut params = vec![Tensor::vector(vec![1.0, -2.0])];
        let grads = vec![Tensor::vector(vec![0.5, 0.25])];
        let mut state = OptimizerState::new(plain_sgd(1.0), &params).unwrap();
        state.step(&mut params, &grads).unwrap();
        assert_eq!(params[0].values(), &[0.5, -2.25]);
    }

    #[test]
    fn adam_first_step_matches_closed_form() {
        // With fresh moments: m_hat = g, v_hat = g^2, so the first update is
        // lr * g / (|g| + eps).
        let lr = 0.01;
        let g = [0.3, -1.7, 0.002];
        let start = [1.0, 2.0, 3.0];
        let mut params = vec![Tensor::vector(start.to_vec())];
        let grads = vec![Tensor::vector(g.to_vec())];
        let mut cfg = OptimizerConfig::adam(lr);
        cfg.weight_decay = 0.0;
        let mut state = OptimizerState::new(cfg, &params).unwrap();
        state.step(&mut params, &grads).unwrap();
        assert_eq!(state.step_count(), 1);
        for i in 0..3 {
            let expected = start[i] - lr * g[i] / (g[i].abs() + cfg.epsilon);
            assert!(
                (params[0].values()[i] - expected).abs() < 1e-12,
                "entry {}: {} vs {}",
                i,
                params[0].values()[i],
                expected
            );
        }
    }

    #[test]
    fn zero_gradient_and_zero_decay_leave_params_unchanged() {
        for cfg in [plain_sgd(0.5), {
            let mut c = OptimizerConfig::adam(0.5);
            c.weight_decay = 0.0;
            c
        }] {
            let mut params = vec![Tensor::vector(vec![1.5, -0.5])];
            let grads = vec![Tensor::zeros(vec![2])];
            let mut state = OptimizerState::new(cfg, &params).unwrap();
            state.step(&mut params, &grads).unwrap();
            assert_eq!(params[0].values(), &[1.5, -0.5]);
        }
    }

    #[test]
    fn misaligned_shapes_are_rejected() {
        let mut params = vec![Tensor::vector(vec![1.0, 2.0])];
        let grads = vec![Tensor::vector(vec![1.0, 2.0, 3.0])];
        let mut state = OptimizerState::new(plain_sgd(0.1), &params).unwrap();
        let err = state.step(&mut params, &grads).unwrap_err();
        assert!(matches!(err, CoreError::Shape { .. }));
    }

    #[test]
    fn momentum_accumulates_across_steps() {
        let mut cfg = plain_sgd(1.0);
        cfg.momentum = 0.5;
        let mut params = vec![Tensor::vector(vec![0.0])];
        let grads = vec![Tensor::vector(vec![1.0])];
        let mut state = OptimizerState::new(cfg, &params).unwrap();
        state.step(&mut params, &grads).unwrap();
        assert_eq!(params[0].values(), &[-1.0]);
        state.step(&mut params, &grads).unwrap();
        // velocity: 0.5 * 1 + 1 = 1.5
        assert_eq!(params[0].values(), &[-2.5]);
    }
}
