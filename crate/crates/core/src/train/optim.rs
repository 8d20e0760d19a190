//! Adam with an inverse-square-root warmup schedule.

use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-9,
        }
    }
}

/// `peak · min(step / warmup, sqrt(warmup / step))` for 1-based `step`.
pub fn learning_rate(peak: f64, warmup: usize, step: usize) -> f64 {
    let s = step.max(1) as f64;
    let w = warmup.max(1) as f64;
    peak * (s / w).min((w / s).sqrt())
}

/// First and second moment estimates for a set of tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub cfg: AdamConfig,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    /// Updates applied so far, per tensor (frozen tensors stay at 0).
    pub t: Vec<u64>,
}

impl Adam {
    pub fn new(cfg: AdamConfig, shapes: &[Tensor]) -> Self {
        Self {
            cfg,
            m: shapes.iter().map(|t| vec![0.0; t.len()]).collect(),
            v: shapes.iter().map(|t| vec![0.0; t.len()]).collect(),
            t: vec![0; shapes.len()],
        }
    }

    /// Applies one bias-corrected update to `param` (tensor `id`).
    pub fn update(&mut self, id: usize, param: &mut [f64], grad: &[f64], lr: f64) {
        let AdamConfig { beta1, beta2, eps } = self.cfg;
        self.t[id] += 1;
        let t = self.t[id] as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        let (m, v) = (&mut self.m[id], &mut self.v[id]);
        for i in 0..param.len() {
            let g = grad[i];
            m[i] = beta1 * m[i] + (1.0 - beta1) * g;
            v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
            if lr != 0.0 {
                param[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
            }
        }
    }
}

/// Scale factor bringing the global gradient norm down to `max_norm`
/// (1 when already within it or when clipping is off).
pub fn clip_factor(grads: &[&[f64]], max_norm: f64) -> f64 {
    if max_norm <= 0.0 {
        return 1.0;
    }
    let norm = grads.iter().flat_map(|g| g.iter()).map(|x| x * x).sum::<f64>().sqrt();
    if norm > max_norm {
        max_norm / norm
    } else {
        1.0
    }
}
