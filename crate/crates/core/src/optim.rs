//! Adam with per-parameter moment state.
//!
//! Moment buffers are keyed by parameter id and created lazily, so
//! parameters registered mid-run (adapter factors) start with fresh state
//! and their bias correction counts from their own first step.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::graph::GradientMap;
use crate::params::{ParamId, ParamStore};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamSlot {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Adam {
    pub config: AdamConfig,
    slots: BTreeMap<ParamId, AdamSlot>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Adam {
            config,
            slots: BTreeMap::new(),
        }
    }

    /// Apply one update to every parameter present in `grads`. Parameters
    /// without gradients (frozen or unused) are untouched.
    pub fn step(&mut self, store: &mut ParamStore, grads: &GradientMap) {
        let lr = self.config.learning_rate;
        let (b1, b2, eps) = (self.config.beta1, self.config.beta2, self.config.epsilon);
        for (id, grad) in grads.iter() {
            let n = grad.numel();
            let slot = self.slots.entry(id).or_insert_with(|| AdamSlot {
                m: vec![0.0; n],
                v: vec![0.0; n],
                step: 0,
            });
            slot.step += 1;
            let bc1 = 1.0 - b1.powi(slot.step as i32);
            let bc2 = 1.0 - b2.powi(slot.step as i32);
            let value = store.value_mut(id).data_mut();
            for ((w, g), (m, v)) in value
                .iter_mut()
                .zip(grad.data())
                .zip(slot.m.iter_mut().zip(slot.v.iter_mut()))
            {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *w -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }

    /// Drop moment state for every parameter `keep` rejects. Used when the
    /// base model freezes and its optimizer state is discarded.
    pub fn retain_slots(&mut self, keep: impl Fn(ParamId) -> bool) {
        self.slots.retain(|id, _| keep(*id));
    }

    pub fn slot(&self, id: ParamId) -> Option<&AdamSlot> {
        self.slots.get(&id)
    }

    pub fn slots(&self) -> impl Iterator<Item = (ParamId, &AdamSlot)> {
        self.slots.iter().map(|(id, s)| (*id, s))
    }

    pub fn insert_slot(&mut self, id: ParamId, slot: AdamSlot) {
        self.slots.insert(id, slot);
    }

    pub fn tracked_params(&self) -> usize {
        self.slots.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Graph;
    use crate::tensor::Tensor;

    fn quadratic_setup() -> (ParamStore, ParamId) {
        let mut store = ParamStore::new();
        let id = store.register("w", Tensor::new(vec![2], vec![5.0, -3.0]).unwrap(), true);
        (store, id)
    }

    fn quadratic_grads(store: &ParamStore, id: ParamId) -> GradientMap {
        // loss = 0.5 ||w||^2, gradient = w
        let mut g = Graph::new();
        let w = g.param(store, id);
        let sq = g.mul(w, w).unwrap();
        let s = g.sum(sq);
        let loss = g.scale(s, 0.5);
        g.backward(loss).unwrap()
    }

    #[test]
    fn adam_descends_a_quadratic() {
        let (mut store, id) = quadratic_setup();
        let mut adam = Adam::new(AdamConfig {
            learning_rate: 0.1,
            ..AdamConfig::default()
        });
        let initial: f64 = store.value(id).data().iter().map(|v| v * v).sum();
        for _ in 0..200 {
            let grads = quadratic_grads(&store, id);
            adam.step(&mut store, &grads);
        }
        let fin: f64 = store.value(id).data().iter().map(|v| v * v).sum();
        assert!(fin < initial * 1e-2, "{fin} vs {initial}");
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        // with bias correction, |update| == lr for any nonzero gradient
        let (mut store, id) = quadratic_setup();
        let mut adam = Adam::new(AdamConfig {
            learning_rate: 0.05,
            ..AdamConfig::default()
        });
        let before = store.value(id).data().to_vec();
        let grads = quadratic_grads(&store, id);
        adam.step(&mut store, &grads);
        for (b, a) in before.iter().zip(store.value(id).data()) {
            assert!(((b - a).abs() - 0.05).abs() < 1e-6);
        }
    }

    #[test]
    fn frozen_params_are_not_touched() {
        let (mut store, id) = quadratic_setup();
        store.set_requires_grad(id, false);
        let mut adam = Adam::new(AdamConfig::default());
        let before = store.value(id).clone();
        let grads = quadratic_grads(&store, id); // empty: requires_grad is off
        assert!(grads.is_empty());
        adam.step(&mut store, &grads);
        assert!(store.value(id).bits_eq(&before));
    }

    #[test]
    fn retain_slots_drops_state() {
        let (mut store, id) = quadratic_setup();
        let mut adam = Adam::new(AdamConfig::default());
        let grads = quadratic_grads(&store, id);
        adam.step(&mut store, &grads);
        assert_eq!(adam.tracked_params(), 1);
        adam.retain_slots(|_| false);
        assert_eq!(adam.tracked_params(), 0);
    }
}
