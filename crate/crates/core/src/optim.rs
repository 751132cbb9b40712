// SPDX-License-Identifier: MIT OR Apache-2.0

//! AdamW with decoupled weight decay and a linear learning-rate schedule.

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

pub struct AdamW {
    cfg: AdamWConfig,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
    t: i32,
}

impl AdamW {
    /// One moment buffer per parameter tensor, sized by `numels`.
    pub fn new(cfg: AdamWConfig, numels: &[usize]) -> Self {
        Self {
            cfg,
            m: numels.iter().map(|&n| vec![0.0; n]).collect(),
            v: numels.iter().map(|&n| vec![0.0; n]).collect(),
            t: 0,
        }
    }

    pub fn steps_taken(&self) -> i32 {
        self.t
    }

    /// Updates `params` in place. `decay[i]` selects tensors that receive
    /// weight decay.
    pub fn step(&mut self, params: &mut [&mut Tensor<f32>], grads: &[Tensor<f32>], lr: f64, decay: &[bool]) {
        assert_eq!(params.len(), grads.len());
        assert_eq!(params.len(), self.m.len());
        self.t += 1;
        let c = self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.t);
        let bc2 = 1.0 - c.beta2.powi(self.t);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let wd = if decay[i] { lr * c.weight_decay } else { 0.0 };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (((pv, &gv), mv), vv) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                let gv = gv as f64;
                *mv = (c.beta1 * *mv as f64 + (1.0 - c.beta1) * gv) as f32;
                *vv = (c.beta2 * *vv as f64 + (1.0 - c.beta2) * gv * gv) as f32;
                let m_hat = *mv as f64 / bc1;
                let v_hat = *vv as f64 / bc2;
                let mut x = *pv as f64;
                x -= wd * x;
                x -= lr * m_hat / (v_hat.sqrt() + c.eps);
                *pv = x as f32;
            }
        }
    }
}

/// Linear warmup to `peak` over `warmup` steps, then linear decay to zero at
/// `total` steps.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearSchedule {
    pub peak: f64,
    pub warmup: usize,
    pub total: usize,
}

impl LinearSchedule {
    pub fn lr_at(&self, step: usize) -> f64 {
        if step < self.warmup {
            return self.peak * (step + 1) as f64 / self.warmup as f64;
        }
        let span = self.total.saturating_sub(self.warmup).max(1) as f64;
        let done = (step - self.warmup) as f64;
        self.peak * (1.0 - done / span).max(0.0)
    }
}

/// Scales `grads` so that their joint L2 norm is at most `max_norm`; returns
/// the norm before clipping.
pub fn clip_global_norm(grads: &mut [Tensor<f32>], max_norm: f64) -> f64 {
    let norm = grads.iter().map(Tensor::sq_norm).sum::<f64>().sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = (max_norm / norm) as f32;
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}
