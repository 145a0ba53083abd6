//! Adaptive-moment optimizer with decoupled weight decay.
//!
//! The optimizer snapshots the trainable parameter set at construction, so
//! the freeze policy must be applied to the store first. Parameters frozen
//! afterwards would still be updated; nothing in the pipeline does that.

use alloc::vec::Vec;

use ndarray::ArrayD;
use thiserror::Error;

use crate::fmath;
use crate::nn::{ParamId, ParamStore};

#[derive(Clone, Debug)]
pub struct OptimConfig {
    pub lr: f32,
    pub weight_decay: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl OptimConfig {
    pub fn new(lr: f32, weight_decay: f32) -> Self {
        Self {
            lr,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Error, Debug, Clone, PartialEq, Eq)]
pub enum OptimError {
    #[error("no trainable parameters; the freeze policy left nothing to optimize")]
    NothingTrainable,
    #[error("learning rate must be positive")]
    BadLearningRate,
}

#[derive(Debug)]
struct Slot {
    id: ParamId,
    m: ArrayD<f32>,
    v: ArrayD<f32>,
}

#[derive(Debug)]
pub struct AdamW {
    cfg: OptimConfig,
    slots: Vec<Slot>,
    step_count: u64,
}

impl AdamW {
    /// Builds moment state for every parameter that is trainable right now.
    pub fn new(store: &ParamStore, cfg: OptimConfig) -> Result<Self, OptimError> {
        if !(cfg.lr > 0.0) {
            return Err(OptimError::BadLearningRate);
        }
        let slots: Vec<Slot> = store
            .trainable_ids()
            .into_iter()
            .map(|id| {
                let shape = store.value(id).shape().to_vec();
                Slot {
                    id,
                    m: ArrayD::zeros(&shape[..]),
                    v: ArrayD::zeros(&shape[..]),
                }
            })
            .collect();
        if slots.is_empty() {
            return Err(OptimError::NothingTrainable);
        }
        Ok(Self {
            cfg,
            slots,
            step_count: 0,
        })
    }

    /// Parameters this optimizer updates.
    pub fn param_ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.slots.iter().map(|s| s.id)
    }

    pub fn param_count(&self) -> usize {
        self.slots.len()
    }

    /// Scalar learning rate currently in effect.
    pub fn lr(&self) -> f32 {
        self.cfg.lr
    }

    /// Replaces the learning rate (used by the optional schedule).
    pub fn set_lr(&mut self, lr: f32) {
        self.cfg.lr = lr;
    }

    /// One update over the gradients accumulated in the store. Parameters
    /// without a gradient are still weight-decayed; gradients are cleared
    /// afterwards.
    pub fn step(&mut self, store: &mut ParamStore) {
        self.step_count += 1;
        let t = self.step_count as i32;
        let c = &self.cfg;
        let bc1 = 1.0 - powi(c.beta1, t);
        let bc2 = 1.0 - powi(c.beta2, t);
        for slot in &mut self.slots {
            let grad: ArrayD<f32> = match store.grad(slot.id) {
                Some(g) => g.clone(),
                None => ArrayD::zeros(store.value(slot.id).shape()),
            };
            ndarray::Zip::from(&mut slot.m)
                .and(&grad)
                .for_each(|m, &g| *m = c.beta1 * *m + (1.0 - c.beta1) * g);
            ndarray::Zip::from(&mut slot.v)
                .and(&grad)
                .for_each(|v, &g| *v = c.beta2 * *v + (1.0 - c.beta2) * g * g);
            let value = store.value_mut(slot.id);
            ndarray::Zip::from(value)
                .and(&slot.m)
                .and(&slot.v)
                .for_each(|p, &m, &v| {
                    let mhat = m / bc1;
                    let vhat = v / bc2;
                    *p -= c.lr * (mhat / (fmath::sqrtf(vhat) + c.eps) + c.weight_decay * *p);
                });
        }
        store.clear_grads();
    }
}

fn powi(base: f32, exp: i32) -> f32 {
    let mut acc = 1.0f32;
    for _ in 0..exp {
        acc *= base;
    }
    acc
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::ArrayD;

    fn scalar_store(value: f32, trainable: bool) -> (ParamStore, ParamId) {
        let mut store = ParamStore::new();
        let id = store.add(
            "w",
            ArrayD::from_elem(ndarray::IxDyn(&[1]), value),
            trainable,
        );
        (store, id)
    }

    #[test]
    fn fully_frozen_store_is_a_configuration_error() {
        let (store, _) = scalar_store(1.0, false);
        assert_eq!(
            AdamW::new(&store, OptimConfig::new(1e-3, 0.0)).unwrap_err(),
            OptimError::NothingTrainable
        );
    }

    #[test]
    fn nonpositive_learning_rate_is_rejected() {
        let (store, _) = scalar_store(1.0, true);
        assert_eq!(
            AdamW::new(&store, OptimConfig::new(0.0, 0.0)).unwrap_err(),
            OptimError::BadLearningRate
        );
    }

    #[test]
    fn steps_on_a_quadratic_reduce_it() {
        // f(w) = (w - 3)^2, started at w = 0.
        let (mut store, id) = scalar_store(0.0, true);
        let mut opt = AdamW::new(&store, OptimConfig::new(0.05, 0.0)).unwrap();
        let objective = |w: f32| (w - 3.0) * (w - 3.0);
        let start = objective(store.value(id)[[0]]);
        for _ in 0..200 {
            let w = store.value(id)[[0]];
            let grad = 2.0 * (w - 3.0);
            store.accumulate_grad(id, ArrayD::from_elem(ndarray::IxDyn(&[1]), grad));
            opt.step(&mut store);
        }
        let end = objective(store.value(id)[[0]]);
        assert!(end < start * 1e-3, "start {start}, end {end}");
        assert!((store.value(id)[[0]] - 3.0).abs() < 0.2);
    }

    #[test]
    fn first_step_moves_by_roughly_the_learning_rate() {
        // With bias correction the first update is lr * g / (|g| + eps).
        let (mut store, id) = scalar_store(1.0, true);
        let mut opt = AdamW::new(&store, OptimConfig::new(0.01, 0.0)).unwrap();
        store.accumulate_grad(id, ArrayD::from_elem(ndarray::IxDyn(&[1]), 4.0));
        opt.step(&mut store);
        let w = store.value(id)[[0]];
        assert!((w - (1.0 - 0.01)).abs() < 1e-5, "w = {w}");
    }

    #[test]
    fn decay_is_decoupled_from_the_gradient() {
        // Zero gradient: a coupled implementation would leave the weight
        // unchanged; decoupled decay still shrinks it by lr * wd * w.
        let (mut store, id) = scalar_store(2.0, true);
        let mut opt = AdamW::new(&store, OptimConfig::new(0.1, 0.5)).unwrap();
        opt.step(&mut store);
        let w = store.value(id)[[0]];
        assert!((w - (2.0 - 0.1 * 0.5 * 2.0)).abs() < 1e-6, "w = {w}");
    }

    #[test]
    fn only_trainable_parameters_are_touched() {
        let mut store = ParamStore::new();
        let free = store.add("a.w", ArrayD::from_elem(ndarray::IxDyn(&[2]), 1.0), true);
        let frozen = store.add("b.w", ArrayD::from_elem(ndarray::IxDyn(&[2]), 1.0), false);
        let mut opt = AdamW::new(&store, OptimConfig::new(0.1, 0.1)).unwrap();
        assert_eq!(opt.param_count(), 1);
        assert!(opt.param_ids().all(|id| id == free));
        store.accumulate_grad(free, ArrayD::from_elem(ndarray::IxDyn(&[2]), 1.0));
        store.accumulate_grad(frozen, ArrayD::from_elem(ndarray::IxDyn(&[2]), 1.0));
        opt.step(&mut store);
        assert_eq!(store.value(frozen)[[0]], 1.0);
        assert_ne!(store.value(free)[[0]], 1.0);
    }
}
