//! Run reporting: the in-memory [`RunReport`], its CSV/JSON export, the
//! plot-data emitter, and the parsers that replay exported files.
//!
//! Floats are written with Rust's shortest round-trip formatting, so a
//! value parsed back from any CSV here is bit-identical to the one that
//! was written. Replays over exported files therefore reproduce the run's
//! decisions exactly.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModuleAddress, ModuleRole};
use crate::telemetry::{deltas_between, WindowStats};
use crate::trainer::{EpochRecord, EventRecord, Phase, SwitchMetadata, TrainState};

pub const FORMAT_VERSION: u32 = 1;

/// One closed window as exported: its stats plus the deltas against the
/// previous window (absent for the first).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowRecord {
    pub index: usize,
    pub epoch_start: usize,
    pub epoch_end: usize,
    pub loss: f64,
    pub module_norms: BTreeMap<ModuleRole, f64>,
    pub loss_delta_pct: Option<f64>,
    pub module_deltas_pct: Option<BTreeMap<ModuleRole, f64>>,
}

/// Byte estimate for parameters, gradients, and Adam moments, f64 at rest.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemoryEstimate {
    pub parameter_bytes: u64,
    pub gradient_bytes: u64,
    pub optimizer_state_bytes: u64,
}

impl MemoryEstimate {
    pub fn compute(total_params: usize, trainable_params: usize) -> Self {
        MemoryEstimate {
            parameter_bytes: 8 * total_params as u64,
            gradient_bytes: 8 * trainable_params as u64,
            optimizer_state_bytes: 16 * trainable_params as u64,
        }
    }

    pub fn total(&self) -> u64 {
        self.parameter_bytes + self.gradient_bytes + self.optimizer_state_bytes
    }
}

/// Aggregate statistics over a finished run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregates {
    pub total_wall_seconds: f64,
    pub mean_epoch_seconds_full: Option<f64>,
    pub mean_epoch_seconds_warmup: Option<f64>,
    pub mean_epoch_seconds_lora_only: Option<f64>,
    /// Mean full-phase epoch seconds over mean adapter-only epoch seconds.
    pub speedup_full_over_lora: Option<f64>,
    pub trainable_params_full: usize,
    pub trainable_params_lora_only: Option<usize>,
    /// Adapter-only trainable count over full trainable count.
    pub param_reduction_ratio: Option<f64>,
    pub memory_full: MemoryEstimate,
    pub memory_lora_only: Option<MemoryEstimate>,
    pub memory_bytes_saved: Option<u64>,
}

/// Everything a run produced. Serializes to `run.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub format_version: u32,
    pub config: crate::config::RunConfig,
    pub epochs: Vec<EpochRecord>,
    pub windows: Vec<WindowRecord>,
    /// Per-epoch per-layer norms, for plot emission and replay.
    pub epoch_layer_norms: Vec<crate::telemetry::EpochSnapshot>,
    pub switch: SwitchMetadata,
    pub aggregates: Aggregates,
    pub events: Vec<EventRecord>,
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let collected: Vec<f64> = values.collect();
    if collected.is_empty() {
        None
    } else {
        Some(collected.iter().sum::<f64>() / collected.len() as f64)
    }
}

/// Assemble the report from a finished (or stopped) run's state.
pub fn build_report(state: &TrainState) -> Result<RunReport> {
    let ledger_windows = state.ledger.windows();
    let mut windows = Vec::with_capacity(ledger_windows.len());
    for (i, w) in ledger_windows.iter().enumerate() {
        let (loss_delta_pct, module_deltas_pct) = if i == 0 {
            (None, None)
        } else {
            let d = deltas_between(&ledger_windows[i - 1], w)?;
            (Some(d.loss_delta_pct), Some(d.module_deltas_pct))
        };
        windows.push(WindowRecord {
            index: w.index,
            epoch_start: w.epoch_start,
            epoch_end: w.epoch_end,
            loss: w.loss,
            module_norms: w.module_norms.clone(),
            loss_delta_pct,
            module_deltas_pct,
        });
    }

    let records = &state.records;
    let phase_mean = |phase: Phase| {
        mean(
            records
                .iter()
                .filter(|r| r.phase == phase)
                .map(|r| r.wall_seconds),
        )
    };
    let mean_full = phase_mean(Phase::Full);
    let mean_warmup = phase_mean(Phase::Warmup);
    let mean_lora = phase_mean(Phase::LoraOnly);
    let speedup = match (mean_full, mean_lora) {
        (Some(f), Some(l)) if l > 0.0 => Some(f / l),
        _ => None,
    };

    let trainable_full = records
        .iter()
        .find(|r| r.phase == Phase::Full)
        .map(|r| r.trainable_params)
        .unwrap_or(0);
    let trainable_lora = records
        .iter()
        .rev()
        .find(|r| r.phase == Phase::LoraOnly)
        .map(|r| r.trainable_params);
    let ratio = trainable_lora.map(|l| l as f64 / trainable_full as f64);

    let memory_full = MemoryEstimate::compute(trainable_full, trainable_full);
    let memory_lora = trainable_lora.map(|adapters| {
        MemoryEstimate::compute(trainable_full + adapters, adapters)
    });
    let saved = memory_lora.map(|m| memory_full.total().saturating_sub(m.total()));

    Ok(RunReport {
        format_version: FORMAT_VERSION,
        config: state.config.clone(),
        epochs: records.clone(),
        windows,
        epoch_layer_norms: state.snapshots.clone(),
        switch: state.switch.clone(),
        aggregates: Aggregates {
            total_wall_seconds: records.iter().map(|r| r.wall_seconds).sum(),
            mean_epoch_seconds_full: mean_full,
            mean_epoch_seconds_warmup: mean_warmup,
            mean_epoch_seconds_lora_only: mean_lora,
            speedup_full_over_lora: speedup,
            trainable_params_full: trainable_full,
            trainable_params_lora_only: trainable_lora,
            param_reduction_ratio: ratio,
            memory_full,
            memory_lora_only: memory_lora,
            memory_bytes_saved: saved,
        },
        events: state.events.clone(),
    })
}

/// Roles a report tracks, in canonical order.
fn report_roles(report: &RunReport) -> Vec<ModuleRole> {
    report
        .windows
        .first()
        .map(|w| w.module_norms.keys().copied().collect())
        .unwrap_or_else(|| {
            report
                .epoch_layer_norms
                .first()
                .map(|s| {
                    let mut roles: Vec<ModuleRole> =
                        s.layer_norms.keys().map(|a| a.role).collect();
                    roles.dedup();
                    roles
                })
                .unwrap_or_default()
        })
}

fn create(path: &Path) -> Result<fs::File> {
    fs::File::create(path).map_err(|e| {
        Error::Report(format!("cannot write {}: {e}", path.display()))
    })
}

/// Write `metrics.csv`, `windows.csv`, `run.json`, `events.log`, and (for
/// a switching run) `switch_deltas.csv` into `dir`.
pub fn export_report(report: &RunReport, dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let mut written = Vec::new();

    let metrics = dir.join("metrics.csv");
    {
        let mut f = create(&metrics)?;
        writeln!(
            f,
            "epoch,phase,loss,train_acc,wall_s,trainable_params,examples_per_s"
        )?;
        for r in &report.epochs {
            writeln!(
                f,
                "{},{},{},{},{},{},{}",
                r.epoch,
                r.phase,
                r.loss,
                r.train_accuracy,
                r.wall_seconds,
                r.trainable_params,
                r.examples_per_second
            )?;
        }
    }
    written.push(metrics);

    let windows = dir.join("windows.csv");
    {
        let roles = report_roles(report);
        let mut f = create(&windows)?;
        let mut header = String::from("window,epoch_start,epoch_end,loss,loss_delta_pct");
        for role in &roles {
            header.push_str(&format!(",norm_{role}"));
        }
        for role in &roles {
            header.push_str(&format!(",delta_pct_{role}"));
        }
        writeln!(f, "{header}")?;
        for w in &report.windows {
            let mut line = format!(
                "{},{},{},{},{}",
                w.index,
                w.epoch_start,
                w.epoch_end,
                w.loss,
                w.loss_delta_pct.map(|d| d.to_string()).unwrap_or_default()
            );
            for role in &roles {
                line.push_str(&format!(",{}", w.module_norms[role]));
            }
            for role in &roles {
                let cell = w
                    .module_deltas_pct
                    .as_ref()
                    .map(|m| m[role].to_string())
                    .unwrap_or_default();
                line.push_str(&format!(",{cell}"));
            }
            writeln!(f, "{line}")?;
        }
    }
    written.push(windows);

    let run_json = dir.join("run.json");
    fs::write(&run_json, serde_json::to_string_pretty(report)?)?;
    written.push(run_json);

    let events = dir.join("events.log");
    {
        let mut f = create(&events)?;
        for e in &report.events {
            writeln!(f, "epoch={} {}", e.epoch, e.message)?;
        }
    }
    written.push(events);

    if !report.switch.layer_deltas_pct.is_empty() {
        let deltas = dir.join("switch_deltas.csv");
        let mut f = create(&deltas)?;
        writeln!(f, "address,delta_pct")?;
        for (addr, d) in &report.switch.layer_deltas_pct {
            writeln!(f, "{addr},{d}")?;
        }
        written.push(deltas);
    }

    Ok(written)
}

/// Write plot-ready CSVs under `dir/plots`: per-role norm curves, the loss
/// curve, per-layer query norms, and the epoch-time curve.
pub fn emit_plot_data(report: &RunReport, dir: &Path) -> Result<Vec<PathBuf>> {
    let plots = dir.join("plots");
    fs::create_dir_all(&plots)?;
    let mut written = Vec::new();
    let roles = report_roles(report);

    let role_norms = plots.join("role_norms.csv");
    {
        let mut f = create(&role_norms)?;
        let header: Vec<String> = roles.iter().map(|r| r.to_string()).collect();
        writeln!(f, "epoch,{}", header.join(","))?;
        for snap in &report.epoch_layer_norms {
            let mut line = snap.epoch.to_string();
            for role in &roles {
                let layer_values: Vec<f64> = snap
                    .layer_norms
                    .iter()
                    .filter(|(a, _)| a.role == *role)
                    .map(|(_, v)| *v)
                    .collect();
                let mean = layer_values.iter().sum::<f64>() / layer_values.len() as f64;
                line.push_str(&format!(",{mean}"));
            }
            writeln!(f, "{line}")?;
        }
    }
    written.push(role_norms);

    let loss = plots.join("loss.csv");
    {
        let mut f = create(&loss)?;
        writeln!(f, "epoch,loss")?;
        for r in &report.epochs {
            writeln!(f, "{},{}", r.epoch, r.loss)?;
        }
    }
    written.push(loss);

    if roles.contains(&ModuleRole::Query) {
        let query = plots.join("query_layer_norms.csv");
        let mut f = create(&query)?;
        let layers: Vec<usize> = report
            .epoch_layer_norms
            .first()
            .map(|s| {
                s.layer_norms
                    .keys()
                    .filter(|a| a.role == ModuleRole::Query)
                    .map(|a| a.layer)
                    .collect()
            })
            .unwrap_or_default();
        let header: Vec<String> = layers.iter().map(|l| format!("layer{l}")).collect();
        writeln!(f, "epoch,{}", header.join(","))?;
        for snap in &report.epoch_layer_norms {
            let mut line = snap.epoch.to_string();
            for l in &layers {
                line.push_str(&format!(
                    ",{}",
                    snap.layer_norms[&ModuleAddress::new(*l, ModuleRole::Query)]
                ));
            }
            writeln!(f, "{line}")?;
        }
        written.push(query);
    }

    let epoch_time = plots.join("epoch_time.csv");
    {
        let mut f = create(&epoch_time)?;
        writeln!(f, "epoch,wall_s")?;
        for r in &report.epochs {
            writeln!(f, "{},{}", r.epoch, r.wall_seconds)?;
        }
    }
    written.push(epoch_time);

    Ok(written)
}

/// Read a `run.json` back.
pub fn read_run_json(path: &Path) -> Result<RunReport> {
    let text = fs::read_to_string(path)?;
    let report: RunReport = serde_json::from_str(&text)?;
    if report.format_version != FORMAT_VERSION {
        return Err(Error::Report(format!(
            "run.json format version {} unsupported (expected {FORMAT_VERSION})",
            report.format_version
        )));
    }
    Ok(report)
}

/// Parse an exported `windows.csv` back into window statistics suitable
/// for gate replay. Layer-level norms are not part of the file, so the
/// returned windows carry role means only.
pub fn read_windows_csv(path: &Path) -> Result<Vec<WindowStats>> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Report(format!("{}: empty file", path.display())))?;
    let columns: Vec<&str> = header.split(',').collect();
    let find = |name: &str| {
        columns
            .iter()
            .position(|c| *c == name)
            .ok_or_else(|| Error::Report(format!("{}: missing column {name}", path.display())))
    };
    let idx_window = find("window")?;
    let idx_start = find("epoch_start")?;
    let idx_end = find("epoch_end")?;
    let idx_loss = find("loss")?;
    let mut role_cols: Vec<(ModuleRole, usize)> = Vec::new();
    for (i, c) in columns.iter().enumerate() {
        if let Some(role) = c.strip_prefix("norm_") {
            role_cols.push((ModuleRole::parse(role)?, i));
        }
    }
    if role_cols.is_empty() {
        return Err(Error::Report(format!(
            "{}: no norm_<role> columns",
            path.display()
        )));
    }

    let mut windows = Vec::new();
    for (lineno, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let cells: Vec<&str> = line.split(',').collect();
        let cell = |i: usize| -> Result<&str> {
            cells.get(i).copied().ok_or_else(|| {
                Error::Report(format!("{}: short row {}", path.display(), lineno + 2))
            })
        };
        let parse_f = |s: &str| -> Result<f64> {
            s.parse::<f64>()
                .map_err(|_| Error::Report(format!("{}: bad float `{s}`", path.display())))
        };
        let parse_u = |s: &str| -> Result<usize> {
            s.parse::<usize>()
                .map_err(|_| Error::Report(format!("{}: bad integer `{s}`", path.display())))
        };
        let mut module_norms = BTreeMap::new();
        for (role, i) in &role_cols {
            module_norms.insert(*role, parse_f(cell(*i)?)?);
        }
        windows.push(WindowStats {
            index: parse_u(cell(idx_window)?)?,
            epoch_start: parse_u(cell(idx_start)?)?,
            epoch_end: parse_u(cell(idx_end)?)?,
            module_norms,
            layer_norms: BTreeMap::new(),
            loss: parse_f(cell(idx_loss)?)?,
        });
    }
    Ok(windows)
}

/// Parse an exported `switch_deltas.csv` back into planner input.
pub fn read_deltas_csv(path: &Path) -> Result<BTreeMap<ModuleAddress, f64>> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Report(format!("{}: empty file", path.display())))?;
    if header != "address,delta_pct" {
        return Err(Error::Report(format!(
            "{}: unexpected header `{header}`",
            path.display()
        )));
    }
    let mut out = BTreeMap::new();
    for line in lines {
        if line.trim().is_empty() {
            continue;
        }
        let (addr, delta) = line.split_once(',').ok_or_else(|| {
            Error::Report(format!("{}: malformed row `{line}`", path.display()))
        })?;
        let addr: ModuleAddress = addr.parse()?;
        let delta: f64 = delta
            .parse()
            .map_err(|_| Error::Report(format!("{}: bad float `{delta}`", path.display())))?;
        out.insert(addr, delta);
    }
    Ok(out)
}

/// Exclusive hold on a run directory, released on drop.
#[derive(Debug)]
pub struct RunLock {
    path: PathBuf,
}

impl RunLock {
    pub fn acquire(dir: &Path) -> Result<RunLock> {
        fs::create_dir_all(dir)?;
        let path = dir.join(".lock");
        match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(RunLock { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                Err(Error::DirectoryLocked(dir.display().to_string()))
            }
            Err(e) => Err(e.into()),
        }
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}
