//! AdamW with decoupled weight decay, and the cosine learning-rate schedule.

use crate::model::{Params, Scalar};

#[derive(Debug, Clone)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(weight_decay: f64) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update using the accumulated gradients multiplied by
    /// `grad_scale`. Decay applies only to parameters flagged for it.
    pub fn step<F: Scalar>(&mut self, model: &mut impl Params<F>, lr: f64, grad_scale: f64) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let (b1, b2, eps, wd) = (self.beta1, self.beta2, self.eps, self.weight_decay);
        let (ms, vs) = (&mut self.m, &mut self.v);
        let mut k = 0;
        model.visit_mut("", &mut |_, p| {
            if ms.len() <= k {
                ms.push(vec![0.0; p.len()]);
                vs.push(vec![0.0; p.len()]);
            }
            let (m, v) = (&mut ms[k], &mut vs[k]);
            for i in 0..p.len() {
                let g = p.grad[i].f64() * grad_scale;
                m[i] = b1 * m[i] + (1.0 - b1) * g;
                v[i] = b2 * v[i] + (1.0 - b2) * g * g;
                let mut w = p.value[i].f64();
                if p.decay {
                    w -= lr * wd * w;
                }
                w -= lr * (m[i] / bc1) / ((v[i] / bc2).sqrt() + eps);
                p.value[i] = F::of(w);
            }
            k += 1;
        });
    }
}

/// Cosine decay from `start` at epoch 0 to `end` at epoch `epochs - 1`.
pub fn cosine_lr(start: f64, end: f64, epoch: usize, epochs: usize) -> f64 {
    if epochs <= 1 {
        return start;
    }
    let t = epoch.min(epochs - 1) as f64 / (epochs - 1) as f64;
    end + (start - end) * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
}
