use serde::{Deserialize, Serialize};

use crate::model::{Gradients, ModelParams};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
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

/// Adam moments for one parameter set.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam<T> {
    m: Gradients<T>,
    v: Gradients<T>,
    t: u64,
}

impl<T: Scalar> Adam<T> {
    pub fn new(params: &ModelParams<T>) -> Self {
        Adam {
            m: params.zero_grads(),
            v: params.zero_grads(),
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// One bias-corrected Adam update at learning rate `lr`.
    pub fn step(
        &mut self,
        params: &mut ModelParams<T>,
        grads: &Gradients<T>,
        cfg: &AdamConfig,
        lr: f64,
    ) {
        self.t += 1;
        let b1 = T::lit(cfg.beta1);
        let b2 = T::lit(cfg.beta2);
        let one = T::one();
        let c1 = one - T::lit(cfg.beta1.powi(self.t.min(i32::MAX as u64) as i32));
        let c2 = one - T::lit(cfg.beta2.powi(self.t.min(i32::MAX as u64) as i32));
        let lr = T::lit(lr);
        let eps = T::lit(cfg.eps);
        for (i, tensor) in params.tensors_mut().iter_mut().enumerate() {
            let g = &grads.tensors[i];
            let m = &mut self.m.tensors[i];
            let v = &mut self.v.tensors[i];
            for k in 0..tensor.data.len() {
                m[k] = b1 * m[k] + (one - b1) * g[k];
                v[k] = b2 * v[k] + (one - b2) * g[k] * g[k];
                let m_hat = m[k] / c1;
                let v_hat = v[k] / c2;
                tensor.data[k] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }
}

/// Linear warmup from 0 to `lr` over `warmup` steps (1-based `step`).
pub fn warmup_lr(lr: f64, step: u64, warmup: u64) -> f64 {
    if warmup == 0 || step >= warmup {
        lr
    } else {
        lr * step as f64 / warmup as f64
    }
}
