//! Adam with per-epoch cosine learning-rate decay.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use crate::error::Result;
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamSlot<T> {
    pub step: u64,
    pub m: Tensor<T>,
    pub v: Tensor<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Adam<T> {
    pub config: AdamConfig,
    slots: BTreeMap<String, AdamSlot<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            slots: BTreeMap::new(),
        }
    }

    pub fn slots(&self) -> &BTreeMap<String, AdamSlot<T>> {
        &self.slots
    }

    pub fn insert_slot(&mut self, name: String, slot: AdamSlot<T>) {
        self.slots.insert(name, slot);
    }

    /// Update every parameter that has an entry in `grads`.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &BTreeMap<String, Tensor<T>>, lr: f64) -> Result<()> {
        let (b1, b2) = (T::lit(self.config.beta1), T::lit(self.config.beta2));
        let eps = T::lit(self.config.eps);
        let wd = T::lit(self.config.weight_decay);
        for (name, grad) in grads {
            let param = store.get_mut(name)?;
            let slot = self.slots.entry(name.clone()).or_insert_with(|| AdamSlot {
                step: 0,
                m: Tensor::zeros(grad.shape().to_vec()),
                v: Tensor::zeros(grad.shape().to_vec()),
            });
            slot.step += 1;
            let t = slot.step as i32;
            let bc1 = T::one() - b1.powi(t);
            let bc2 = T::one() - b2.powi(t);
            let step_size = T::lit(lr) / bc1;
            let (m, v) = (slot.m.data_mut(), slot.v.data_mut());
            for (i, p) in param.data_mut().iter_mut().enumerate() {
                let g = grad.data()[i] + wd * *p;
                m[i] = b1 * m[i] + (T::one() - b1) * g;
                v[i] = b2 * v[i] + (T::one() - b2) * g * g;
                *p -= step_size * m[i] / ((v[i] / bc2).sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Learning rate for `epoch` in `0..epochs`: `base` at epoch 0 decaying along a
/// half cosine toward `floor`.
pub fn cosine_lr(base: f64, floor: f64, epoch: usize, epochs: usize) -> f64 {
    if epochs == 0 {
        return base;
    }
    let progress = epoch as f64 / epochs as f64;
    floor + 0.5 * (base - floor) * (1.0 + (PI * progress).cos())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_schedule_is_monotone() {
        let lrs: Vec<f64> = (0..40).map(|e| cosine_lr(5e-6, 0.0, e, 40)).collect();
        assert_eq!(lrs[0], 5e-6);
        assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
        assert!(*lrs.last().unwrap() <= 5e-6);
    }

    #[test]
    fn adam_minimises_a_quadratic() {
        let mut store = ParamStore::<f64>::new();
        store.insert("x", Tensor::full([2], 3.0));
        let mut adam = Adam::new(AdamConfig::default());
        for _ in 0..2000 {
            let x = store.get("x").unwrap().clone();
            let mut grads = BTreeMap::new();
            grads.insert("x".to_string(), x.map(|v| 2.0 * v));
            adam.step(&mut store, &grads, 1e-2).unwrap();
        }
        assert!(store.get("x").unwrap().data().iter().all(|v| v.abs() < 1e-2));
    }

    #[test]
    fn untouched_params_stay_put() {
        let mut store = ParamStore::<f32>::new();
        store.insert("a", Tensor::full([1], 1.0));
        store.insert("b", Tensor::full([1], 1.0));
        let mut adam = Adam::new(AdamConfig::default());
        let mut grads = BTreeMap::new();
        grads.insert("a".to_string(), Tensor::full([1], 1.0));
        adam.step(&mut store, &grads, 0.1).unwrap();
        assert_eq!(store.get("b").unwrap().data(), &[1.0]);
        assert_ne!(store.get("a").unwrap().data(), &[1.0]);
    }
}
