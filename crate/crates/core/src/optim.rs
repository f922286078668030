//! Adam with step-decayed learning rate and optional global-norm clipping.
//!
//! The learning rate is `lr0 * decay_rate^floor(step / decay_every)`, the
//! standard step schedule. Clipping rescales the *joint* gradient vector over
//! every parameter in the store when its L2 norm exceeds the ceiling, so the
//! update direction is preserved.

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// Optimizer settings.
#[derive(Debug, Clone, Copy)]
pub struct AdamConfig {
    pub lr0: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Multiplier applied every `decay_every` steps.
    pub decay_rate: f64,
    pub decay_every: u64,
    /// Global gradient-norm ceiling; `None` disables clipping.
    pub clip_norm: Option<f64>,
}

impl AdamConfig {
    pub fn new(lr0: f64) -> AdamConfig {
        AdamConfig {
            lr0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            decay_rate: 0.7,
            decay_every: 950,
            clip_norm: Some(5.0),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr0 > 0.0) {
            return Err(Error::invalid(format!("learning rate must be positive, got {}", self.lr0)));
        }
        if !(self.beta1 >= 0.0 && self.beta1 < 1.0 && self.beta2 >= 0.0 && self.beta2 < 1.0) {
            return Err(Error::invalid("Adam betas must lie in [0, 1)".to_string()));
        }
        if !(self.eps > 0.0) || !(self.decay_rate > 0.0) || self.decay_every == 0 {
            return Err(Error::invalid("epsilon, decay rate, and decay period must be positive".to_string()));
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                return Err(Error::invalid(format!("clip norm must be positive, got {c}")));
            }
        }
        Ok(())
    }

    /// Learning rate for a 0-based step index.
    pub fn lr_at(&self, step: u64) -> f64 {
        self.lr0 * self.decay_rate.powi((step / self.decay_every) as i32)
    }
}

/// First/second-moment state, one pair per parameter in registration order.
pub struct AdamState {
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    /// Steps taken so far (also indexes the lr schedule).
    pub steps: u64,
}

impl AdamState {
    pub fn new(store: &ParamStore) -> AdamState {
        let m = store.ids().map(|id| Tensor::zeros(store.value(id).shape())).collect();
        let v = store.ids().map(|id| Tensor::zeros(store.value(id).shape())).collect();
        AdamState { m, v, steps: 0 }
    }

    /// One descent step over every parameter in the store, consuming the
    /// gradients currently held there. Returns the learning rate used.
    pub fn step(&mut self, store: &mut ParamStore, cfg: &AdamConfig) -> Result<f64> {
        cfg.validate()?;
        let ids: Vec<_> = store.ids().collect();
        if ids.len() != self.m.len() {
            return Err(Error::invalid(format!(
                "optimizer state tracks {} parameters, store has {}",
                self.m.len(),
                ids.len()
            )));
        }
        // Optional global-norm clipping across the whole store.
        if let Some(ceiling) = cfg.clip_norm {
            let mut sq = 0.0f64;
            for &id in &ids {
                sq += store.grad(id).map_or(0.0, |g| g.data().iter().map(|v| v * v).sum());
            }
            let norm = sq.sqrt();
            if norm > ceiling {
                let scale = ceiling / norm;
                for &id in &ids {
                    if let Some(g) = store.grad_mut(id) {
                        for v in g.data_mut() {
                            *v *= scale;
                        }
                    }
                }
            }
        }
        let lr = cfg.lr_at(self.steps);
        let t = (self.steps + 1) as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        for (i, &id) in ids.iter().enumerate() {
            let Some(grad) = store.grad(id) else { continue };
            if grad.data().iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!(
                    "gradient of {} is not finite",
                    store.name(id)
                )));
            }
            let grad = grad.clone();
            for (j, g) in grad.data().iter().enumerate() {
                let m = &mut self.m[i].data_mut()[j];
                *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
            }
            for (j, g) in grad.data().iter().enumerate() {
                let v = &mut self.v[i].data_mut()[j];
                *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
            }
            let value = store.value_mut(id);
            for j in 0..value.numel() {
                let mhat = self.m[i].data()[j] / bc1;
                let vhat = self.v[i].data()[j] / bc2;
                value.data_mut()[j] -= lr * mhat / (vhat.sqrt() + cfg.eps);
            }
        }
        self.steps += 1;
        Ok(lr)
    }
}
