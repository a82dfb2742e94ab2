//! Named parameter storage shared by the model, the adapters, and the optimizer.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;

/// Handle into a [`ParamStore`]. Ids are dense and stable for the lifetime
/// of the store, so they double as optimizer slot keys.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ParamId(pub u32);

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Slot {
    name: String,
    value: Tensor,
    requires_grad: bool,
}

/// Flat registry of trainable and frozen tensors, addressed by id or name.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ParamStore {
    slots: Vec<Slot>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore { slots: Vec::new() }
    }

    pub fn register(&mut self, name: impl Into<String>, value: Tensor, requires_grad: bool) -> ParamId {
        let id = ParamId(self.slots.len() as u32);
        self.slots.push(Slot {
            name: name.into(),
            value,
            requires_grad,
        });
        id
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.slots[id.0 as usize].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.slots[id.0 as usize].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.slots[id.0 as usize].name
    }

    pub fn requires_grad(&self, id: ParamId) -> bool {
        self.slots[id.0 as usize].requires_grad
    }

    pub fn set_requires_grad(&mut self, id: ParamId, flag: bool) {
        self.slots[id.0 as usize].requires_grad = flag;
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.slots.len() as u32).map(ParamId)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.slots
            .iter()
            .position(|s| s.name == name)
            .map(|i| ParamId(i as u32))
    }

    /// Total scalar count, optionally restricted to trainable slots.
    pub fn scalar_count(&self, trainable_only: bool) -> usize {
        self.slots
            .iter()
            .filter(|s| !trainable_only || s.requires_grad)
            .map(|s| s.value.numel())
            .sum()
    }

    /// Name -> value snapshot, used by checkpointing.
    pub fn named_values(&self) -> BTreeMap<String, Tensor> {
        self.slots
            .iter()
            .map(|s| (s.name.clone(), s.value.clone()))
            .collect()
    }
}
