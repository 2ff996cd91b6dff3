//! Adam-style adaptive update with bias correction, specialized to the fixed
//! network parameter layout.

use crate::net::{NetworkGrads, NetworkParams};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 8e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn with_learning_rate(learning_rate: f64) -> Self {
        AdamConfig {
            learning_rate,
            ..AdamConfig::default()
        }
    }
}

/// First/second moment accumulators plus the step counter. Single-owner
/// mutable state; never shared between solvers.
#[derive(Debug, Clone)]
pub struct AdamState {
    cfg: AdamConfig,
    step: u64,
    m: NetworkGrads,
    v: NetworkGrads,
}

impl AdamState {
    pub fn new(cfg: AdamConfig, width: usize, out_dim: usize) -> Self {
        assert!(cfg.learning_rate > 0.0, "learning rate must be positive");
        assert!((0.0..1.0).contains(&cfg.beta1), "beta1 must be in [0, 1)");
        assert!((0.0..1.0).contains(&cfg.beta2), "beta2 must be in [0, 1)");
        AdamState {
            cfg,
            step: 0,
            m: NetworkGrads::zeros(width, out_dim),
            v: NetworkGrads::zeros(width, out_dim),
        }
    }

    pub fn config(&self) -> AdamConfig {
        self.cfg
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One parameter update in place. Deterministic given state and gradient.
    pub fn step(&mut self, params: &mut NetworkParams, grads: &NetworkGrads) {
        self.step += 1;
        let t = self.step as i32;
        // Folding both bias corrections into the step size.
        let lr_t = self.cfg.learning_rate * (1.0 - self.cfg.beta2.powi(t)).sqrt()
            / (1.0 - self.cfg.beta1.powi(t));
        let b1 = self.cfg.beta1;
        let b2 = self.cfg.beta2;
        let eps = self.cfg.epsilon;

        let param_tensors = params.tensors_mut();
        let grad_tensors = grads.tensors();
        let m_tensors = self.m.tensors_mut();
        let v_tensors = self.v.tensors_mut();
        for (((p, g), m), v) in param_tensors
            .into_iter()
            .zip(grad_tensors)
            .zip(m_tensors)
            .zip(v_tensors)
        {
            for i in 0..p.len() {
                m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                p[i] -= lr_t * m[i] / (v[i].sqrt() + eps);
            }
        }
    }
}
