use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{ParamStore, Tensor};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub clip_norm: Option<f64>,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.05,
            clip_norm: Some(5.0),
        }
    }
}

/// Linear warmup to `peak`, then cosine decay to `min` at `total` steps.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CosineSchedule {
    pub peak: f64,
    pub min: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
}

impl CosineSchedule {
    pub fn lr(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            return self.peak * (step + 1) as f64 / self.warmup_steps as f64;
        }
        let span = self.total_steps.saturating_sub(self.warmup_steps).max(1);
        let t = ((step - self.warmup_steps) as f64 / span as f64).min(1.0);
        self.min + 0.5 * (self.peak - self.min) * (1.0 + (std::f64::consts::PI * t).cos())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepStats {
    /// Global norm before clipping.
    pub grad_norm: f64,
    pub clipped: bool,
}

/// AdamW with decoupled weight decay, applied only to buffers flagged for
/// decay in the store.
#[derive(Clone, Debug)]
pub struct AdamW<T: Scalar> {
    pub config: AdamWConfig,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub step: u64,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(store: &ParamStore<T>, config: AdamWConfig) -> Self {
        let zeros = || {
            store
                .entries()
                .iter()
                .map(|e| Tensor::zeros(e.value.shape()))
                .collect()
        };
        AdamW {
            config,
            m: zeros(),
            v: zeros(),
            step: 0,
        }
    }

    /// One update with learning rate `lr`; `grads[i]` is `None` for buffers
    /// that received no gradient.
    pub fn update(&mut self, store: &mut ParamStore<T>, grads: &[Option<Tensor<T>>], lr: f64) -> Result<StepStats> {
        if grads.len() != store.len() || self.m.len() != store.len() {
            return Err(Error::shape(format!(
                "{} gradients, {} moments for {} buffers",
                grads.len(),
                self.m.len(),
                store.len()
            )));
        }
        let sq: f64 = grads
            .iter()
            .flatten()
            .flat_map(|g| g.data())
            .map(|&x| x.f64() * x.f64())
            .sum();
        let grad_norm = sq.sqrt();
        let scale = match self.config.clip_norm {
            Some(c) if grad_norm > c => c / grad_norm,
            _ => 1.0,
        };
        self.step += 1;
        let c = &self.config;
        let (b1, b2) = (T::of(c.beta1), T::of(c.beta2));
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        let step_size = T::of(lr / bc1);
        let inv_bc2 = T::of(1.0 / bc2);
        let eps = T::of(c.eps);
        let scale_t = T::of(scale);
        for (i, entry) in store.entries_mut().iter_mut().enumerate() {
            if entry.value.shape() != self.m[i].shape() {
                return Err(Error::shape(format!("moment shape mismatch for {}", entry.name)));
            }
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            let decay = if entry.decay { T::of(lr * c.weight_decay) } else { T::zero() };
            let p = entry.value.data_mut();
            let g = grads[i].as_ref().map(|g| g.data());
            for j in 0..p.len() {
                let gj = g.map_or(T::zero(), |g| g[j] * scale_t);
                m[j] = b1 * m[j] + (T::one() - b1) * gj;
                v[j] = b2 * v[j] + (T::one() - b2) * gj * gj;
                p[j] -= decay * p[j];
                p[j] -= step_size * m[j] / ((v[j] * inv_bc2).sqrt() + eps);
            }
        }
        Ok(StepStats {
            grad_norm,
            clipped: scale < 1.0,
        })
    }
}
