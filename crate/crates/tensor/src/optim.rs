use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Result, TensorError};
use crate::param::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
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
            weight_decay: 1e-4,
        }
    }
}

/// Adam with decoupled weight decay. Moment buffers persist across steps and
/// are indexed like the store they were created for.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub config: AdamWConfig,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: u64,
}

impl AdamW {
    pub fn new(store: &ParamStore, config: AdamWConfig) -> Self {
        let zeros = || {
            store
                .iter()
                .map(|(_, p)| Tensor::zeros(p.value.shape().to_vec()))
                .collect()
        };
        Self {
            config,
            m: zeros(),
            v: zeros(),
            t: 0,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// One update of every non-frozen parameter using its accumulated gradient.
    ///
    /// Gradients are left in place; call [`ParamStore::zero_grad`] before the
    /// next accumulation.
    pub fn step(&mut self, store: &mut ParamStore, lr: f64) -> Result<()> {
        for (_, p) in store.iter() {
            if !p.frozen && p.grad.is_none() {
                return Err(TensorError::MissingGrad(p.name.clone()));
            }
        }
        self.t += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let k = id.index();
            let p = store.get_mut(id);
            if p.frozen {
                continue;
            }
            let g = p.grad.as_ref().expect("checked above").data().to_vec();
            let m = self.m[k].data_mut();
            let v = self.v[k].data_mut();
            for (i, w) in p.value.data_mut().iter_mut().enumerate() {
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g[i];
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g[i] * g[i];
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                *w -= lr * (mhat / (vhat.sqrt() + c.eps) + c.weight_decay * *w);
            }
        }
        Ok(())
    }
}

/// `0.5 · lr_max · (1 + cos(π · step / total_steps))`.
pub fn cosine_anneal(step: usize, total_steps: usize, lr_max: f64) -> f64 {
    if total_steps == 0 {
        return lr_max;
    }
    let frac = step.min(total_steps) as f64 / total_steps as f64;
    0.5 * lr_max * (1.0 + (PI * frac).cos())
}
