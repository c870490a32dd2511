//! Adam with linear warm-up and decoupled weight decay.

use std::collections::HashMap;

use crate::error::Error;
use crate::params::ParamStore;
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq)]
pub struct AdamConfig {
    pub base_lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Fraction of `total_steps` spent ramping the learning rate
    /// linearly from zero to `base_lr`.
    pub warmup_fraction: f64,
    pub total_steps: u64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            base_lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            warmup_fraction: 0.0,
            total_steps: 1,
        }
    }
}

struct Moments<S> {
    m: Vec<S>,
    v: Vec<S>,
}

/// Per-parameter first/second moments plus the shared step counter.
pub struct AdamState<S: Scalar = f64> {
    config: AdamConfig,
    moments: HashMap<String, Moments<S>>,
    t: u64,
}

impl<S: Scalar> AdamState<S> {
    pub fn new(config: AdamConfig) -> Self {
        Self { config, moments: HashMap::new(), t: 0 }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    pub fn config(&self) -> &AdamConfig {
        &self.config
    }

    /// Learning rate in effect for step `t` (1-based).
    pub fn effective_lr(&self, t: u64) -> f64 {
        let warm = self.config.warmup_fraction * self.config.total_steps as f64;
        let factor = if warm > 0.0 { (t as f64 / warm).min(1.0) } else { 1.0 };
        self.config.base_lr * factor
    }

    /// One update over every trainable parameter. Gradients must have
    /// been populated by `backward`; they are left intact so the caller
    /// controls the reset.
    pub fn step(&mut self, store: &mut ParamStore<S>) -> Result<(), Error> {
        self.t += 1;
        let t = self.t;
        let lr = S::of(self.effective_lr(t));
        let b1 = S::of(self.config.beta1);
        let b2 = S::of(self.config.beta2);
        let eps = S::of(self.config.eps);
        let wd = S::of(self.config.weight_decay);
        let bc1 = S::of(1.0 - self.config.beta1.powi(t as i32));
        let bc2 = S::of(1.0 - self.config.beta2.powi(t as i32));

        for id in store.trainable_ids() {
            if store.grad(id).is_none() {
                return Err(Error::MissingGradient { name: store.name(id).to_string() });
            }
            let name = store.name(id).to_string();
            let n = store.value(id).len();
            let mom = self
                .moments
                .entry(name)
                .or_insert_with(|| Moments { m: vec![S::zero(); n], v: vec![S::zero(); n] });

            // Row-masked parameters update only their active slice.
            let range = match store.train_rows(id) {
                Some(rows) => {
                    let cols = store.value(id).shape()[1];
                    rows.start * cols..rows.end * cols
                }
                None => 0..n,
            };

            let grad = store.grad(id).unwrap().values().to_vec();
            let value = store.value_mut(id).values_mut();
            for i in range {
                let g = grad[i];
                mom.m[i] = b1 * mom.m[i] + (S::one() - b1) * g;
                mom.v[i] = b2 * mom.v[i] + (S::one() - b2) * g * g;
                let m_hat = mom.m[i] / bc1;
                let v_hat = mom.v[i] / bc2;
                value[i] = value[i] - lr * (m_hat / (v_hat.sqrt() + eps) + wd * value[i]);
            }
        }
        Ok(())
    }
}
