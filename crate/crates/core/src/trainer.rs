//! The three-phase training loop: full-parameter training, a joint warmup
//! after adapters are injected, then adapter-only training once the base
//! is frozen.
//!
//! The controller runs between epochs. In the full phase it consults the
//! convergence gate at every window boundary once enough windows exist;
//! on the first pass it turns the last window pair's per-layer deltas into
//! a rank plan, injects adapters, and starts the warmup countdown. After
//! `w` warmup epochs the base freezes, base optimizer state is dropped,
//! and only the factor pairs keep training. The gate is never consulted
//! again after it passes; telemetry keeps recording for reporting.

use std::collections::BTreeMap;
use std::fmt;
use std::time::Instant;

use rand::rngs::StdRng;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::config::{RunConfig, RunMode};
use crate::data::{load_dataset, Dataset};
use crate::error::{Error, Result};
use crate::gate;
use crate::graph::Graph;
use crate::lora;
use crate::model::{build_model, Model, ModuleAddress};
use crate::optim::Adam;
use crate::params::ParamId;
use crate::planner::{assign_ranks, RankPlan};
use crate::report::{build_report, RunReport};
use crate::telemetry::{EpochSnapshot, TelemetryLedger, WindowStats};

/// Training phase. Transitions only move forward: full to warmup when the
/// gate passes, warmup to adapter-only after exactly `w` warmup epochs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Phase {
    #[serde(rename = "FULL")]
    Full,
    #[serde(rename = "WARMUP")]
    Warmup,
    #[serde(rename = "LORA_ONLY")]
    LoraOnly,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Phase::Full => "FULL",
            Phase::Warmup => "WARMUP",
            Phase::LoraOnly => "LORA_ONLY",
        })
    }
}

impl std::str::FromStr for Phase {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "FULL" => Ok(Phase::Full),
            "WARMUP" => Ok(Phase::Warmup),
            "LORA_ONLY" => Ok(Phase::LoraOnly),
            other => Err(Error::InvalidConfig {
                key: "phase".into(),
                reason: format!("unknown phase `{other}`"),
            }),
        }
    }
}

/// One completed epoch's metrics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub phase: Phase,
    pub loss: f64,
    pub train_accuracy: f64,
    pub wall_seconds: f64,
    pub trainable_params: usize,
    pub examples_per_second: f64,
}

/// Everything the switch decided, for reproducibility.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SwitchMetadata {
    /// Epoch at whose window boundary the gate passed; also the injection epoch.
    pub gate_pass_epoch: Option<usize>,
    pub injection_epoch: Option<usize>,
    pub freeze_epoch: Option<usize>,
    /// Planner input: absolute per-layer percent deltas of the last window pair.
    pub layer_deltas_pct: BTreeMap<ModuleAddress, f64>,
    pub rank_plan: Option<RankPlan>,
    /// Addresses whose planned rank was lowered to fit the layer: (addr, planned, used).
    pub clamped: Vec<(ModuleAddress, usize, usize)>,
}

/// Timestamped line for the run's event log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventRecord {
    pub epoch: usize,
    pub message: String,
}

/// Mutable state of a run; checkpointable between epochs.
#[derive(Debug)]
pub struct TrainState {
    pub config: RunConfig,
    pub model: Model,
    pub optimizer: Adam,
    pub phase: Phase,
    pub epochs_completed: usize,
    pub ledger: TelemetryLedger,
    pub switch: SwitchMetadata,
    pub records: Vec<EpochRecord>,
    pub snapshots: Vec<EpochSnapshot>,
    pub events: Vec<EventRecord>,
}

/// Deterministic per-purpose stream seed derived from the run seed.
pub fn derive_seed(run_seed: u64, stream: u64) -> u64 {
    // splitmix64 finalizer
    let mut z = run_seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const STREAM_SHUFFLE: u64 = 0x5348; // epoch added per use
const STREAM_INJECT: u64 = 0x494E;

impl TrainState {
    pub fn new(config: RunConfig) -> Result<Self> {
        config.validate()?;
        let model = build_model(&config.model)?;
        let crit = config.gate.criteria()?;
        let addresses = model.enumerate_targets(&crit.roles);
        let ledger = TelemetryLedger::new(crit.m, addresses)?;
        let optimizer = Adam::new(config.optimizer.adam());
        Ok(TrainState {
            config,
            model,
            optimizer,
            phase: Phase::Full,
            epochs_completed: 0,
            ledger,
            switch: SwitchMetadata::default(),
            records: Vec::new(),
            snapshots: Vec::new(),
            events: Vec::new(),
        })
    }

    fn log(&mut self, message: String) {
        self.events.push(EventRecord {
            epoch: self.epochs_completed,
            message,
        });
    }

    /// One pass over the dataset with shuffled mini-batches. Wall time
    /// covers forward, backward, and the optimizer step only.
    pub fn train_epoch(&mut self, data: &Dataset) -> Result<(EpochRecord, Option<WindowStats>)> {
        let epoch = self.epochs_completed;
        let phase = self.phase;
        let n = data.len();
        let batch_size = self.config.optimizer.batch_size.min(n);

        let mut indices: Vec<usize> = (0..n).collect();
        let mut rng = StdRng::seed_from_u64(derive_seed(
            self.config.run.seed,
            STREAM_SHUFFLE + epoch as u64,
        ));
        indices.shuffle(&mut rng);

        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        let mut wall = 0.0f64;

        for (batch_idx, chunk) in indices.chunks(batch_size).enumerate() {
            let (x, targets) = data.batch(chunk);
            let start = Instant::now();
            let mut graph = Graph::new();
            let (loss_node, logits_node) = self.model.loss(&mut graph, x, &targets)?;
            let grads = graph.backward(loss_node)?;
            self.optimizer.step(&mut self.model.store, &grads);
            wall += start.elapsed().as_secs_f64();

            let loss = graph.value(loss_node).scalar_value()?;
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    batch: batch_idx,
                });
            }
            loss_sum += loss * chunk.len() as f64;

            let logits = graph.value(logits_node);
            let classes = data.num_classes();
            for (row, &target) in targets.iter().enumerate() {
                let row_data = &logits.data()[row * classes..(row + 1) * classes];
                let mut best = 0;
                for (j, &v) in row_data.iter().enumerate() {
                    if v > row_data[best] {
                        best = j;
                    }
                }
                if best == target {
                    correct += 1;
                }
            }
        }

        let mean_loss = loss_sum / n as f64;
        let crit = self.config.gate.criteria()?;
        let snapshot = EpochSnapshot {
            epoch,
            layer_norms: self.model.target_norms(&crit.roles),
            loss: mean_loss,
        };
        self.snapshots.push(snapshot.clone());
        let closed = self.ledger.record_epoch(snapshot)?;

        let record = EpochRecord {
            epoch,
            phase,
            loss: mean_loss,
            train_accuracy: correct as f64 / n as f64,
            wall_seconds: wall,
            trainable_params: self.model.parameter_count(true),
            examples_per_second: if wall > 0.0 { n as f64 / wall } else { f64::NAN },
        };
        self.records.push(record.clone());
        self.epochs_completed += 1;
        Ok((record, closed))
    }

    /// Phase controller; call after every epoch with the window that epoch
    /// closed, if any. Returns the phase entered when a transition fires.
    pub fn step_controller(&mut self, closed: Option<&WindowStats>) -> Result<Option<Phase>> {
        match self.phase {
            Phase::Full => {
                if self.config.run.mode != RunMode::Prelora {
                    return Ok(None);
                }
                let Some(window) = closed else {
                    return Ok(None);
                };
                let crit = self.config.gate.criteria()?;
                if self.ledger.windows().len() < crit.k {
                    return Ok(None);
                }
                let pass = gate::evaluate(&self.ledger, &crit)?;
                let deltas = self.ledger.window_deltas(window.index)?;
                let max_dw = deltas
                    .module_deltas_pct
                    .values()
                    .fold(0.0f64, |a, d| a.max(d.abs()));
                self.log(format!(
                    "gate window={} pass={pass} max|dW|={max_dw:.4}% dL={:.4}%",
                    window.index, deltas.loss_delta_pct
                ));
                if !pass {
                    return Ok(None);
                }
                self.switch_to_warmup()?;
                Ok(Some(self.phase))
            }
            Phase::Warmup => {
                let injected = self
                    .switch
                    .injection_epoch
                    .expect("warmup phase implies injection happened");
                let elapsed = self.epochs_completed - 1 - injected;
                if elapsed >= self.config.warmup.epochs {
                    self.freeze()?;
                    Ok(Some(Phase::LoraOnly))
                } else {
                    Ok(None)
                }
            }
            Phase::LoraOnly => Ok(None),
        }
    }

    fn switch_to_warmup(&mut self) -> Result<()> {
        let epoch = self.epochs_completed - 1;
        let deltas = self.ledger.layer_deltas_last_pair()?;
        let ladder = self.config.ranks.ladder()?;
        let mut plan = assign_ranks(&deltas, &ladder, self.config.ranks.degenerate_rule)?;
        let dims: BTreeMap<ModuleAddress, (usize, usize)> = plan
            .addresses()
            .into_iter()
            .map(|a| (a, self.model.target_dims(a)))
            .collect();
        let clamped = plan.clamp_to_dims(&dims, &ladder)?;
        for (addr, planned, used) in &clamped {
            log::warn!("rank {planned} exceeds dims of {addr}; clamped to {used}");
            self.log(format!("clamped {addr}: rank {planned} -> {used}"));
        }
        lora::inject(
            &mut self.model,
            &plan,
            self.config.ranks.scaling,
            derive_seed(self.config.run.seed, STREAM_INJECT),
        )?;
        let ranks: Vec<String> = plan.iter().map(|(a, r)| format!("{a}={r}")).collect();
        self.log(format!("adapters injected: {}", ranks.join(" ")));
        self.switch.gate_pass_epoch = Some(epoch);
        self.switch.injection_epoch = Some(epoch);
        self.switch.layer_deltas_pct = deltas;
        self.switch.rank_plan = Some(plan);
        self.switch.clamped = clamped;
        self.phase = Phase::Warmup;
        if self.config.warmup.epochs == 0 {
            self.freeze()?;
        }
        Ok(())
    }

    fn freeze(&mut self) -> Result<()> {
        lora::freeze_base(&mut self.model);
        let adapter_ids: Vec<ParamId> = self
            .model
            .adapters()
            .values()
            .flat_map(|a| [a.a, a.b])
            .collect();
        self.optimizer.retain_slots(|id| adapter_ids.contains(&id));
        self.phase = Phase::LoraOnly;
        let epoch = self.epochs_completed - 1;
        self.switch.freeze_epoch = Some(epoch);
        self.log(format!(
            "base frozen; trainable parameters now {}",
            self.model.parameter_count(true)
        ));
        Ok(())
    }

    /// Advance to `total_epochs`, writing the configured mid-run checkpoint
    /// if one is requested, then assemble the report.
    pub fn run_to_completion(&mut self, data: &Dataset) -> Result<RunReport> {
        let total = self.config.run.total_epochs;
        while self.epochs_completed < total {
            let (_, closed) = self.train_epoch(data)?;
            self.step_controller(closed.as_ref())?;
            if Some(self.epochs_completed) == self.config.run.checkpoint_epoch.map(|e| e + 1) {
                if let Some(dir) = self.config.run.output_dir.clone() {
                    std::fs::create_dir_all(&dir)?;
                    let path = dir.join("checkpoint.json");
                    crate::checkpoint::save(self, &path)?;
                    self.log(format!("checkpoint written to {}", path.display()));
                }
            }
        }
        build_report(self)
    }
}

/// Check that a loaded dataset matches what the model was configured for.
pub fn check_data_compatibility(config: &RunConfig, data: &Dataset) -> Result<()> {
    if data.input_dim() != config.model.input_dim {
        return Err(Error::InvalidConfig {
            key: "model.input_dim".into(),
            reason: format!(
                "model expects {}, dataset provides {}",
                config.model.input_dim,
                data.input_dim()
            ),
        });
    }
    if data.num_classes() > config.model.num_classes {
        return Err(Error::InvalidConfig {
            key: "model.num_classes".into(),
            reason: format!(
                "model expects {}, dataset provides {}",
                config.model.num_classes,
                data.num_classes()
            ),
        });
    }
    Ok(())
}

/// Load the configured dataset and execute a fresh run end to end.
pub fn run(config: &RunConfig) -> Result<RunReport> {
    let data = load_dataset(&config.data)?;
    check_data_compatibility(config, &data)?;
    let mut state = TrainState::new(config.clone())?;
    state.run_to_completion(&data)
}
