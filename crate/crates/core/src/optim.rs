//! AdamW with decoupled weight decay and bias correction.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::nn::{GradBuffer, Group, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            weight_decay: 5e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug)]
pub struct AdamW<T> {
    pub config: AdamWConfig,
    /// Per-group learning-rate overrides.
    pub group_lr: HashMap<Group, f64>,
    /// Multiplier applied to every group rate (schedule).
    pub lr_scale: f64,
    pub(crate) m: Vec<Tensor<T>>,
    pub(crate) v: Vec<Tensor<T>>,
    pub(crate) step: u64,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(store: &ParamStore<T>, config: AdamWConfig) -> Self {
        let zeros: Vec<Tensor<T>> = store.ids().map(|id| Tensor::zeros(store.get(id).shape())).collect();
        Self {
            config,
            group_lr: HashMap::new(),
            lr_scale: 1.0,
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn moments(&self) -> (&[Tensor<T>], &[Tensor<T>]) {
        (&self.m, &self.v)
    }

    pub fn lr_for(&self, group: Group) -> f64 {
        self.group_lr.get(&group).copied().unwrap_or(self.config.lr) * self.lr_scale
    }

    /// Applies one update from `grads` and clears them.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &mut GradBuffer<T>) -> Result<()> {
        if grads.grads.len() != store.len() {
            return Err(Error::MissingGradient(format!(
                "gradient buffer holds {} entries for {} parameters",
                grads.grads.len(),
                store.len()
            )));
        }
        if let Some(id) = store.ids().find(|id| grads.grads[id.index()].is_none()) {
            return Err(Error::MissingGradient(store.name(id).to_string()));
        }
        self.step += 1;
        let c = &self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let (b1, b2, eps) = (T::c(c.beta1), T::c(c.beta2), T::c(c.eps));
        let (ib1, ib2) = (T::c(1.0 - c.beta1), T::c(1.0 - c.beta2));
        for id in store.ids() {
            let i = id.index();
            let lr = self.lr_for(store.group(id));
            let decay = T::c(1.0 - lr * c.weight_decay);
            let step_size = T::c(lr / bc1);
            let ibc2 = T::c(1.0 / bc2);
            let g = grads.grads[i].as_ref().expect("checked above");
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            let p = store.get_mut(id).data_mut();
            for j in 0..p.len() {
                let gj = g.data()[j];
                m[j] = b1 * m[j] + ib1 * gj;
                v[j] = b2 * v[j] + ib2 * gj * gj;
                let denom = (v[j] * ibc2).sqrt() + eps;
                p[j] = p[j] * decay - step_size * m[j] / denom;
            }
        }
        grads.clear();
        Ok(())
    }

    pub(crate) fn restore(&mut self, m: Vec<Tensor<T>>, v: Vec<Tensor<T>>, step: u64) {
        self.m = m;
        self.v = v;
        self.step = step;
    }
}
