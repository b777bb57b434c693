//! Adam with bias correction. Moment buffers are keyed by parameter name
//! and created lazily, so freezing a parameter mid-run simply stops its
//! updates without disturbing the others.

use indexmap::IndexMap;

use crate::error::Result;
use crate::nn::store::ParamStore;
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> AdamConfig {
        AdamConfig {
            lr,
            ..AdamConfig::default()
        }
    }
}

pub struct AdamState<S: Scalar> {
    m: IndexMap<String, Tensor<S>>,
    v: IndexMap<String, Tensor<S>>,
    t: u64,
}

impl<S: Scalar> Default for AdamState<S> {
    fn default() -> Self {
        AdamState::new()
    }
}

impl<S: Scalar> AdamState<S> {
    pub fn new() -> AdamState<S> {
        AdamState {
            m: IndexMap::new(),
            v: IndexMap::new(),
            t: 0,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// One update over every trainable parameter using its accumulated
    /// gradient. Gradients are left in place; the training loop zeroes them.
    pub fn step(&mut self, store: &mut ParamStore<S>, cfg: &AdamConfig) -> Result<()> {
        self.t += 1;
        let b1 = S::from_f64(cfg.beta1);
        let b2 = S::from_f64(cfg.beta2);
        let one = S::one();
        let corr1 = S::from_f64(1.0 - cfg.beta1.powi(self.t as i32));
        let corr2 = S::from_f64(1.0 - cfg.beta2.powi(self.t as i32));
        let lr = S::from_f64(cfg.lr);
        let eps = S::from_f64(cfg.eps);

        for p in store.iter_mut() {
            if !p.trainable {
                continue;
            }
            let m = self
                .m
                .entry(p.name.clone())
                .or_insert_with(|| Tensor::zeros(p.value.dims().to_vec()));
            let v = self
                .v
                .entry(p.name.clone())
                .or_insert_with(|| Tensor::zeros(p.value.dims().to_vec()));
            let val = p.value.data_mut();
            for ((x, &g), (mi, vi)) in val
                .iter_mut()
                .zip(p.grad.data())
                .zip(m.data_mut().iter_mut().zip(v.data_mut()))
            {
                *mi = b1 * *mi + (one - b1) * g;
                *vi = b2 * *vi + (one - b2) * g * g;
                let mhat = *mi / corr1;
                let vhat = *vi / corr2;
                *x = *x - lr * mhat / (vhat.sqrt() + eps);
            }
        }
        for p in store.iter() {
            if p.trainable {
                p.value.validate_finite()?;
            }
        }
        Ok(())
    }
}
