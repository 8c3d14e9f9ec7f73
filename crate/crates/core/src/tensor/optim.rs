use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::params::{ParamId, ParamStore, StorageId};
use super::real::Real;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global L2 clip applied to the managed gradients before the update.
    pub clip_norm: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: Some(1.0),
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(Error::Config(format!("learning rate must be > 0, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("Adam betas must lie in [0,1)".into()));
        }
        if !(self.eps > 0.0) {
            return Err(Error::Config("Adam eps must be > 0".into()));
        }
        Ok(())
    }
}

/// Bias-corrected Adam over a fixed set of storages.
///
/// Moments are kept per storage, so a parameter reachable under several
/// aliased names is updated exactly once per step.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    cfg: AdamConfig,
    storages: Vec<StorageId>,
    moments: HashMap<StorageId, (Vec<T>, Vec<T>)>,
    t: u64,
}

impl<T: Real> Adam<T> {
    /// Manages the storages behind `params` (deduplicated, in order).
    pub fn new(cfg: AdamConfig, store: &ParamStore<T>, params: &[ParamId]) -> Result<Self> {
        cfg.validate()?;
        let mut storages = Vec::new();
        for &p in params {
            let s = store.storage(p);
            if !storages.contains(&s) {
                storages.push(s);
            }
        }
        Ok(Adam {
            cfg,
            storages,
            moments: HashMap::new(),
            t: 0,
        })
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    pub fn storages(&self) -> &[StorageId] {
        &self.storages
    }

    pub fn config(&self) -> &AdamConfig {
        &self.cfg
    }

    /// Applies one update from the accumulated gradients, then zeroes them.
    pub fn step(&mut self, store: &mut ParamStore<T>) {
        self.t += 1;
        let t = self.t as f64;
        let clip = self.clip_factor(store);
        let b1 = T::lit(self.cfg.beta1);
        let b2 = T::lit(self.cfg.beta2);
        let c1 = T::lit(1.0 - self.cfg.beta1.powf(t));
        let c2 = T::lit(1.0 - self.cfg.beta2.powf(t));
        let lr = T::lit(self.cfg.lr);
        let eps = T::lit(self.cfg.eps);
        for &s in &self.storages {
            let slot = store.slot_mut(s);
            let n = slot.value.numel();
            let (m, v) = self
                .moments
                .entry(s)
                .or_insert_with(|| (vec![T::zero(); n], vec![T::zero(); n]));
            let grad = slot.grad.data_mut();
            let value = slot.value.data_mut();
            for i in 0..n {
                let g = grad[i] * clip;
                m[i] = b1 * m[i] + (T::one() - b1) * g;
                v[i] = b2 * v[i] + (T::one() - b2) * g * g;
                let mh = m[i] / c1;
                let vh = v[i] / c2;
                value[i] -= lr * mh / (vh.sqrt() + eps);
                grad[i] = T::zero();
            }
        }
    }

    fn clip_factor(&self, store: &mut ParamStore<T>) -> T {
        let Some(max) = self.cfg.clip_norm else {
            return T::one();
        };
        let sq: f64 = self
            .storages
            .iter()
            .map(|&s| {
                store
                    .slot_mut(s)
                    .grad
                    .data()
                    .iter()
                    .map(|g| g.as_f64() * g.as_f64())
                    .sum::<f64>()
            })
            .sum();
        let norm = sq.sqrt();
        if norm > max {
            T::lit(max / norm)
        } else {
            T::one()
        }
    }
}

/// Plain gradient descent over a fixed set of storages.
#[derive(Clone, Debug)]
pub struct Sgd {
    lr: f64,
    storages: Vec<StorageId>,
}

impl Sgd {
    pub fn new<T: Real>(lr: f64, store: &ParamStore<T>, params: &[ParamId]) -> Result<Self> {
        if !(lr > 0.0) {
            return Err(Error::Config(format!("learning rate must be > 0, got {lr}")));
        }
        let mut storages = Vec::new();
        for &p in params {
            let s = store.storage(p);
            if !storages.contains(&s) {
                storages.push(s);
            }
        }
        Ok(Sgd { lr, storages })
    }

    pub fn step<T: Real>(&self, store: &mut ParamStore<T>) {
        let lr = T::lit(self.lr);
        for &s in &self.storages {
            let slot = store.slot_mut(s);
            let grad = slot.grad.data_mut();
            for (v, g) in slot.value.data_mut().iter_mut().zip(grad.iter_mut()) {
                *v -= lr * *g;
                *g = T::zero();
            }
        }
    }
}
