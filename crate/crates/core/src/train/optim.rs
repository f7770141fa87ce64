//! Adam with bias correction and the cosine learning-rate schedule.

use crate::autodiff::ParamStore;
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 0.002,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Moment accumulators, one pair per parameter in store order.
#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    pub step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(config: AdamConfig, store: &ParamStore) -> Self {
        let zeros = || store.iter().map(|(_, p)| Tensor::zeros(p.value.shape())).collect();
        Self {
            config,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    /// Applies one update at learning rate `lr` to every trainable parameter
    /// using the gradients accumulated in `store`.
    pub fn step(&mut self, store: &mut ParamStore, lr: f64) {
        self.step += 1;
        let AdamConfig { beta1, beta2, eps, .. } = self.config;
        let c1 = 1.0 - beta1.powi(self.step as i32);
        let c2 = 1.0 - beta2.powi(self.step as i32);
        for (i, p) in store.iter_mut().enumerate() {
            if !p.trainable {
                continue;
            }
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for (((w, &g), m), v) in p.value.data_mut().iter_mut().zip(p.grad.data()).zip(m).zip(v) {
                let g = g as f64;
                let mn = beta1 * *m as f64 + (1.0 - beta1) * g;
                let vn = beta2 * *v as f64 + (1.0 - beta2) * g * g;
                *m = mn as f32;
                *v = vn as f32;
                let update = lr * (mn / c1) / ((vn / c2).sqrt() + eps);
                *w = (*w as f64 - update) as f32;
            }
        }
    }
}

/// `base * (1 + cos(pi * epoch / total)) / 2`.
pub fn cosine_lr(epoch: usize, total: usize, base: f64) -> f64 {
    if total == 0 {
        return base;
    }
    let t = epoch.min(total) as f64 / total as f64;
    base * (1.0 + (std::f64::consts::PI * t).cos()) / 2.0
}
