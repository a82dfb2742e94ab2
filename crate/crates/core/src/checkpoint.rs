//! Versioned JSON checkpoints that round-trip a run bit-exactly.
//!
//! Floats serialize with shortest round-trip formatting, so restored
//! parameter and moment values are bit-identical to the saved ones.
//! Restoring rebuilds the model from its config, re-injects adapters from
//! the saved plan, then overwrites every tensor by name.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lora;
use crate::model::{build_model, ModuleAddress};
use crate::optim::{Adam, AdamSlot};
use crate::planner::RankPlan;
use crate::telemetry::{EpochSnapshot, TelemetryLedger};
use crate::tensor::Tensor;
use crate::trainer::{EpochRecord, EventRecord, Phase, SwitchMetadata, TrainState};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct AdapterMeta {
    address: ModuleAddress,
    rank: usize,
    scaling: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Checkpoint {
    format_version: u32,
    config: crate::config::RunConfig,
    phase: Phase,
    epochs_completed: usize,
    params: BTreeMap<String, Tensor>,
    requires_grad: BTreeMap<String, bool>,
    adapters: Vec<AdapterMeta>,
    optimizer_slots: BTreeMap<String, AdamSlot>,
    ledger: TelemetryLedger,
    switch: SwitchMetadata,
    records: Vec<EpochRecord>,
    snapshots: Vec<EpochSnapshot>,
    events: Vec<EventRecord>,
}

/// Serialize the full training state to `path`.
pub fn save(state: &TrainState, path: &Path) -> Result<()> {
    let store = &state.model.store;
    let mut requires_grad = BTreeMap::new();
    for id in store.ids() {
        requires_grad.insert(store.name(id).to_string(), store.requires_grad(id));
    }
    let mut optimizer_slots = BTreeMap::new();
    for (id, slot) in state.optimizer.slots() {
        optimizer_slots.insert(store.name(id).to_string(), slot.clone());
    }
    let adapters = state
        .model
        .adapters()
        .iter()
        .map(|(addr, ad)| AdapterMeta {
            address: *addr,
            rank: ad.rank,
            scaling: ad.scaling,
        })
        .collect();

    let checkpoint = Checkpoint {
        format_version: CHECKPOINT_VERSION,
        config: state.config.clone(),
        phase: state.phase,
        epochs_completed: state.epochs_completed,
        params: store.named_values(),
        requires_grad,
        adapters,
        optimizer_slots,
        ledger: state.ledger.clone(),
        switch: state.switch.clone(),
        records: state.records.clone(),
        snapshots: state.snapshots.clone(),
        events: state.events.clone(),
    };
    let text = serde_json::to_string(&checkpoint)?;
    std::fs::write(path, text)?;
    Ok(())
}

/// Rebuild a [`TrainState`] from a checkpoint file.
pub fn restore(path: &Path) -> Result<TrainState> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Checkpoint(format!("cannot read {}: {e}", path.display())))?;
    let cp: Checkpoint = serde_json::from_str(&text)
        .map_err(|e| Error::Checkpoint(format!("corrupt checkpoint: {e}")))?;
    if cp.format_version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "format version {} unsupported (expected {CHECKPOINT_VERSION})",
            cp.format_version
        )));
    }
    cp.config.validate()?;
    let mut model = build_model(&cp.config.model)?;

    if !cp.adapters.is_empty() {
        let assignments: BTreeMap<ModuleAddress, usize> = cp
            .adapters
            .iter()
            .map(|m| (m.address, m.rank))
            .collect();
        let scaling = cp.adapters[0].scaling;
        // factor values are overwritten below; the injection seed is moot
        lora::inject(&mut model, &RankPlan::from_assignments(assignments), scaling, 0)?;
    }

    let ids: Vec<_> = model.store.ids().collect();
    if ids.len() != cp.params.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint has {} tensors, rebuilt model has {}",
            cp.params.len(),
            ids.len()
        )));
    }
    for id in &ids {
        let name = model.store.name(*id).to_string();
        let saved = cp
            .params
            .get(&name)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{name}`")))?;
        if saved.shape() != model.store.value(*id).shape() {
            return Err(Error::Checkpoint(format!(
                "shape mismatch for `{name}`: {:?} vs {:?}",
                saved.shape(),
                model.store.value(*id).shape()
            )));
        }
        *model.store.value_mut(*id) = saved.clone();
        let flag = cp.requires_grad.get(&name).copied().ok_or_else(|| {
            Error::Checkpoint(format!("missing requires_grad flag for `{name}`"))
        })?;
        model.store.set_requires_grad(*id, flag);
    }

    let mut optimizer = Adam::new(cp.config.optimizer.adam());
    for (name, slot) in cp.optimizer_slots {
        let id = model
            .store
            .find(&name)
            .ok_or_else(|| Error::Checkpoint(format!("optimizer slot for unknown tensor `{name}`")))?;
        let numel = model.store.value(id).numel();
        if slot.m.len() != numel || slot.v.len() != numel {
            return Err(Error::Checkpoint(format!(
                "optimizer slot size mismatch for `{name}`"
            )));
        }
        optimizer.insert_slot(id, slot);
    }

    Ok(TrainState {
        config: cp.config,
        model,
        optimizer,
        phase: cp.phase,
        epochs_completed: cp.epochs_completed,
        ledger: cp.ledger,
        switch: cp.switch,
        records: cp.records,
        snapshots: cp.snapshots,
        events: cp.events,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::RunConfig;
    use crate::data::synthetic;

    fn config() -> RunConfig {
        RunConfig::from_toml_str(
            r#"
[model]
num_layers = 1
hidden_dim = 8
num_heads = 2
mlp_dim = 16
num_classes = 3
input_dim = 6
num_tokens = 2
seed = 5

[data]
kind = "synthetic"
num_examples = 30
input_dim = 6
num_classes = 3
seed = 2

[optimizer]
batch_size = 10

[gate]
k = 2
m = 2
tau = 90.0
zeta = 500.0

[warmup]
epochs = 1

[ranks]
r_min = 2
r_max = 4

[run]
total_epochs = 8
seed = 17
"#,
        )
        .unwrap()
    }

    #[test]
    fn checkpoint_round_trips_bit_exactly() {
        let data = synthetic(30, 6, 3, 2).unwrap();
        let mut state = TrainState::new(config()).unwrap();
        for _ in 0..5 {
            let (_, closed) = state.train_epoch(&data).unwrap();
            state.step_controller(closed.as_ref()).unwrap();
        }
        assert!(state.model.is_adapted(), "gate should have fired");

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("checkpoint.json");
        save(&state, &path).unwrap();
        let restored = restore(&path).unwrap();

        assert_eq!(restored.epochs_completed, state.epochs_completed);
        assert_eq!(restored.phase, state.phase);
        assert_eq!(restored.records, state.records);
        assert_eq!(restored.switch, state.switch);
        for id in state.model.store.ids() {
            let name = state.model.store.name(id);
            let rid = restored.model.store.find(name).unwrap();
            assert!(
                state.model.store.value(id).bits_eq(restored.model.store.value(rid)),
                "tensor `{name}` drifted"
            );
            assert_eq!(
                state.model.store.requires_grad(id),
                restored.model.store.requires_grad(rid)
            );
        }
        for (id, slot) in state.optimizer.slots() {
            let name = state.model.store.name(id);
            let rid = restored.model.store.find(name).unwrap();
            let rslot = restored.optimizer.slot(rid).unwrap();
            assert_eq!(slot.step, rslot.step);
            assert!(slot.m.iter().zip(&rslot.m).all(|(a, b)| a.to_bits() == b.to_bits()));
            assert!(slot.v.iter().zip(&rslot.v).all(|(a, b)| a.to_bits() == b.to_bits()));
        }
    }

    #[test]
    fn version_mismatch_rejected() {
        let data = synthetic(30, 6, 3, 2).unwrap();
        let mut state = TrainState::new(config()).unwrap();
        state.train_epoch(&data).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("checkpoint.json");
        save(&state, &path).unwrap();
        let text = std::fs::read_to_string(&path)
            .unwrap()
            .replace("\"format_version\":1", "\"format_version\":99");
        std::fs::write(&path, text).unwrap();
        let err = restore(&path).unwrap_err();
        assert!(err.to_string().contains("version"));
    }

    #[test]
    fn corrupt_file_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("checkpoint.json");
        std::fs::write(&path, "{not json").unwrap();
        assert!(matches!(restore(&path), Err(Error::Checkpoint(_))));
    }
}
