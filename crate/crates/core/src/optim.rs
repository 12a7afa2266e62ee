//! Optimizers and the learning-rate schedule.

use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OptimizerKind {
    Sgd,
    AdamW,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub warmup_ratio: f64,
    pub batch_size: usize,
    pub epochs: usize,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            kind: OptimizerKind::AdamW,
            lr: 1e-3,
            weight_decay: 0.0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            warmup_ratio: 0.1,
            batch_size: 8,
            epochs: 1,
        }
    }
}

/// Linear warm-up followed by cosine decay to zero.
pub fn cosine_lr(base: f64, step: usize, total: usize, warmup_ratio: f64) -> f64 {
    if total == 0 {
        return base;
    }
    let warmup = (warmup_ratio * total as f64).round() as usize;
    if step < warmup {
        return base * (step + 1) as f64 / warmup as f64;
    }
    let span = (total - warmup).max(1) as f64;
    let progress = (step - warmup) as f64 / span;
    0.5 * base * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// Per-parameter optimizer state for a fixed list of tensors.
#[derive(Debug, Clone)]
pub struct Optimizer {
    config: OptimizerConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl Optimizer {
    pub fn new(config: OptimizerConfig, params: &[Tensor]) -> Self {
        let zeros = |p: &[Tensor]| p.iter().map(|t| vec![0.0; t.numel()]).collect();
        Self {
            m: zeros(params),
            v: zeros(params),
            config,
            t: 0,
        }
    }

    /// Applies one update. Entries of `update_mask` that are false are left untouched,
    /// including their moment estimates.
    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor], lr: f64, update_mask: &[bool]) {
        self.t += 1;
        let c = &self.config;
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            if !update_mask[i] {
                continue;
            }
            let pd = p.data_mut();
            let gd = g.data();
            match c.kind {
                OptimizerKind::Sgd => {
                    for (x, &gr) in pd.iter_mut().zip(gd) {
                        *x -= lr * (gr + c.weight_decay * *x);
                    }
                }
                OptimizerKind::AdamW => {
                    let b1t = 1.0 - c.beta1.powi(self.t as i32);
                    let b2t = 1.0 - c.beta2.powi(self.t as i32);
                    let (m, v) = (&mut self.m[i], &mut self.v[i]);
                    for j in 0..pd.len() {
                        m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * gd[j];
                        v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * gd[j] * gd[j];
                        let mh = m[j] / b1t;
                        let vh = v[j] / b2t;
                        pd[j] -= lr * (mh / (vh.sqrt() + c.eps) + c.weight_decay * pd[j]);
                    }
                }
            }
        }
    }
}
