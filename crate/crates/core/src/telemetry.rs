//! Per-epoch weight-norm and loss recording, aggregated into fixed windows.
//!
//! Epochs accumulate in an open buffer; every `m` consecutive epochs close
//! into an immutable [`WindowStats`]. Windows never overlap and never slide.
//! Percentage deltas between consecutive windows are what the convergence
//! gate and the rank planner consume.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModuleAddress, ModuleRole};

/// One epoch's measurements: the Frobenius norm of every target layer and
/// the mean training loss.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochSnapshot {
    pub epoch: usize,
    pub layer_norms: BTreeMap<ModuleAddress, f64>,
    pub loss: f64,
}

/// Aggregates over one closed window of `m` epochs. All statistics are
/// arithmetic means over the window's epochs; `module_norms` additionally
/// averages across each role's layers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowStats {
    /// 1-based window index.
    pub index: usize,
    pub epoch_start: usize,
    pub epoch_end: usize,
    pub module_norms: BTreeMap<ModuleRole, f64>,
    pub layer_norms: BTreeMap<ModuleAddress, f64>,
    pub loss: f64,
}

/// Signed percentage changes between a consecutive window pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowDeltas {
    /// Index `t` of the newer window; deltas compare `t - 1` to `t`.
    pub index: usize,
    pub module_deltas_pct: BTreeMap<ModuleRole, f64>,
    pub loss_delta_pct: f64,
}

fn percent_change(prev: f64, cur: f64, what: &str) -> Result<f64> {
    if prev == 0.0 {
        return Err(Error::DegenerateTrace(format!(
            "{what} is zero in the previous window; percent change undefined"
        )));
    }
    Ok((cur - prev) / prev * 100.0)
}

/// Epoch recorder and window aggregator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TelemetryLedger {
    window_size: usize,
    addresses: Vec<ModuleAddress>,
    windows: Vec<WindowStats>,
    buffer: Vec<EpochSnapshot>,
}

impl TelemetryLedger {
    pub fn new(window_size: usize, addresses: Vec<ModuleAddress>) -> Result<Self> {
        if window_size == 0 {
            return Err(Error::InvalidConfig {
                key: "gate.m".into(),
                reason: "window size must be positive".into(),
            });
        }
        if addresses.is_empty() {
            return Err(Error::InvalidConfig {
                key: "roles".into(),
                reason: "ledger needs at least one target address".into(),
            });
        }
        Ok(TelemetryLedger {
            window_size,
            addresses,
            windows: Vec::new(),
            buffer: Vec::new(),
        })
    }

    pub fn window_size(&self) -> usize {
        self.window_size
    }

    pub fn windows(&self) -> &[WindowStats] {
        &self.windows
    }

    pub fn addresses(&self) -> &[ModuleAddress] {
        &self.addresses
    }

    pub fn buffered_epochs(&self) -> usize {
        self.buffer.len()
    }

    fn next_epoch(&self) -> usize {
        self.windows.len() * self.window_size + self.buffer.len()
    }

    /// Record one epoch. Returns the window that closed, if this epoch
    /// completed one.
    pub fn record_epoch(&mut self, snap: EpochSnapshot) -> Result<Option<WindowStats>> {
        let expected = self.next_epoch();
        if snap.epoch != expected {
            return Err(Error::EpochOutOfOrder {
                got: snap.epoch,
                expected,
            });
        }
        if !snap.loss.is_finite() {
            return Err(Error::DegenerateTrace(format!(
                "non-finite loss at epoch {}",
                snap.epoch
            )));
        }
        for addr in &self.addresses {
            match snap.layer_norms.get(addr) {
                Some(v) if v.is_finite() && *v >= 0.0 => {}
                Some(v) => {
                    return Err(Error::DegenerateTrace(format!(
                        "invalid norm {v} for {addr} at epoch {}",
                        snap.epoch
                    )))
                }
                None => {
                    return Err(Error::DegenerateTrace(format!(
                        "missing norm for {addr} at epoch {}",
                        snap.epoch
                    )))
                }
            }
        }
        if snap.layer_norms.len() != self.addresses.len() {
            return Err(Error::DegenerateTrace(format!(
                "snapshot covers {} addresses, ledger tracks {}",
                snap.layer_norms.len(),
                self.addresses.len()
            )));
        }
        self.buffer.push(snap);
        if self.buffer.len() == self.window_size {
            let stats = self.close_window();
            self.windows.push(stats.clone());
            self.buffer.clear();
            return Ok(Some(stats));
        }
        Ok(None)
    }

    fn close_window(&self) -> WindowStats {
        let m = self.window_size as f64;
        let mut layer_norms = BTreeMap::new();
        for addr in &self.addresses {
            let mean = self.buffer.iter().map(|s| s.layer_norms[addr]).sum::<f64>() / m;
            layer_norms.insert(*addr, mean);
        }
        // role mean over its layers' window means
        let mut module_norms = BTreeMap::new();
        for role in ModuleRole::ALL {
            let members: Vec<f64> = layer_norms
                .iter()
                .filter(|(a, _)| a.role == role)
                .map(|(_, v)| *v)
                .collect();
            if !members.is_empty() {
                module_norms.insert(role, members.iter().sum::<f64>() / members.len() as f64);
            }
        }
        let loss = self.buffer.iter().map(|s| s.loss).sum::<f64>() / m;
        WindowStats {
            index: self.windows.len() + 1,
            epoch_start: self.buffer[0].epoch,
            epoch_end: self.buffer[self.window_size - 1].epoch,
            module_norms,
            layer_norms,
            loss,
        }
    }

    /// Per-role and loss percentage changes between windows `t - 1` and `t`
    /// (1-based, `t >= 2`).
    pub fn window_deltas(&self, t: usize) -> Result<WindowDeltas> {
        if t < 2 || t > self.windows.len() {
            return Err(Error::NotReady {
                have: self.windows.len(),
                need: t.max(2),
            });
        }
        deltas_between(&self.windows[t - 2], &self.windows[t - 1])
    }

    /// Absolute per-layer percentage change between the two most recent
    /// windows; the rank planner's input.
    pub fn layer_deltas_last_pair(&self) -> Result<BTreeMap<ModuleAddress, f64>> {
        let n = self.windows.len();
        if n < 2 {
            return Err(Error::NotReady { have: n, need: 2 });
        }
        let (prev, cur) = (&self.windows[n - 2], &self.windows[n - 1]);
        let mut out = BTreeMap::new();
        for addr in &self.addresses {
            let p = prev.layer_norms[addr];
            let c = cur.layer_norms[addr];
            out.insert(*addr, percent_change(p, c, &format!("norm of {addr}"))?.abs());
        }
        Ok(out)
    }
}

/// Signed deltas between two closed windows; `cur` must follow `prev`.
pub fn deltas_between(prev: &WindowStats, cur: &WindowStats) -> Result<WindowDeltas> {
    let mut module_deltas_pct = BTreeMap::new();
    for (role, cur_norm) in &cur.module_norms {
        let prev_norm = prev.module_norms.get(role).ok_or_else(|| {
            Error::DegenerateTrace(format!("role {role} missing from previous window"))
        })?;
        module_deltas_pct.insert(
            *role,
            percent_change(*prev_norm, *cur_norm, &format!("norm of role {role}"))?,
        );
    }
    let loss_delta_pct = percent_change(prev.loss, cur.loss, "loss")?;
    Ok(WindowDeltas {
        index: cur.index,
        module_deltas_pct,
        loss_delta_pct,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn addrs() -> Vec<ModuleAddress> {
        vec![
            ModuleAddress::new(0, ModuleRole::Query),
            ModuleAddress::new(1, ModuleRole::Query),
        ]
    }

    fn snap(epoch: usize, n0: f64, n1: f64, loss: f64) -> EpochSnapshot {
        let mut layer_norms = BTreeMap::new();
        layer_norms.insert(ModuleAddress::new(0, ModuleRole::Query), n0);
        layer_norms.insert(ModuleAddress::new(1, ModuleRole::Query), n1);
        EpochSnapshot {
            epoch,
            layer_norms,
            loss,
        }
    }

    #[test]
    fn no_window_before_m_epochs() {
        let mut ledger = TelemetryLedger::new(3, addrs()).unwrap();
        assert!(ledger.record_epoch(snap(0, 1.0, 1.0, 3.0)).unwrap().is_none());
        assert!(ledger.record_epoch(snap(1, 1.0, 1.0, 2.0)).unwrap().is_none());
        assert!(ledger.windows().is_empty());
    }

    #[test]
    fn window_means_are_arithmetic() {
        let mut ledger = TelemetryLedger::new(3, addrs()).unwrap();
        ledger.record_epoch(snap(0, 10.0, 20.0, 3.0)).unwrap();
        ledger.record_epoch(snap(1, 12.0, 20.0, 2.0)).unwrap();
        let w = ledger.record_epoch(snap(2, 14.0, 20.0, 1.0)).unwrap().unwrap();
        assert_eq!(w.index, 1);
        assert_eq!(w.loss, 2.0);
        assert_eq!(w.layer_norms[&ModuleAddress::new(0, ModuleRole::Query)], 12.0);
        assert_eq!(w.module_norms[&ModuleRole::Query], 16.0);
        assert_eq!((w.epoch_start, w.epoch_end), (0, 2));
    }

    #[test]
    fn module_norm_is_mean_of_layer_window_means() {
        let mut ledger = TelemetryLedger::new(2, addrs()).unwrap();
        ledger.record_epoch(snap(0, 1.0, 3.0, 1.0)).unwrap();
        let w = ledger.record_epoch(snap(1, 2.0, 5.0, 1.0)).unwrap().unwrap();
        let mean_layers =
            (w.layer_norms[&ModuleAddress::new(0, ModuleRole::Query)]
                + w.layer_norms[&ModuleAddress::new(1, ModuleRole::Query)])
                / 2.0;
        assert!((w.module_norms[&ModuleRole::Query] - mean_layers).abs() < 1e-12);
    }

    #[test]
    fn non_consecutive_epoch_rejected() {
        let mut ledger = TelemetryLedger::new(3, addrs()).unwrap();
        ledger.record_epoch(snap(0, 1.0, 1.0, 1.0)).unwrap();
        assert!(matches!(
            ledger.record_epoch(snap(2, 1.0, 1.0, 1.0)),
            Err(Error::EpochOutOfOrder { got: 2, expected: 1 })
        ));
    }

    #[test]
    fn incomplete_snapshot_rejected() {
        let mut ledger = TelemetryLedger::new(3, addrs()).unwrap();
        let mut s = snap(0, 1.0, 1.0, 1.0);
        s.layer_norms.remove(&ModuleAddress::new(1, ModuleRole::Query));
        assert!(ledger.record_epoch(s).is_err());
    }

    #[test]
    fn window_deltas_hand_arithmetic() {
        let mut ledger = TelemetryLedger::new(1, addrs()).unwrap();
        ledger.record_epoch(snap(0, 100.0, 100.0, 2.0)).unwrap();
        ledger.record_epoch(snap(1, 100.4, 100.4, 1.9)).unwrap();
        let d = ledger.window_deltas(2).unwrap();
        assert!((d.module_deltas_pct[&ModuleRole::Query] - 0.4).abs() < 1e-9);
        assert!((d.loss_delta_pct - -5.0).abs() < 1e-9);
    }

    #[test]
    fn unchanged_windows_have_zero_deltas() {
        let mut ledger = TelemetryLedger::new(1, addrs()).unwrap();
        ledger.record_epoch(snap(0, 7.0, 7.0, 1.0)).unwrap();
        ledger.record_epoch(snap(1, 7.0, 7.0, 1.0)).unwrap();
        let d = ledger.window_deltas(2).unwrap();
        assert_eq!(d.module_deltas_pct[&ModuleRole::Query], 0.0);
        assert_eq!(d.loss_delta_pct, 0.0);
    }

    #[test]
    fn zero_denominator_is_an_error() {
        let mut ledger = TelemetryLedger::new(1, addrs()).unwrap();
        ledger.record_epoch(snap(0, 0.0, 0.0, 1.0)).unwrap();
        ledger.record_epoch(snap(1, 1.0, 1.0, 1.0)).unwrap();
        assert!(ledger.window_deltas(2).is_err());
        // a single zero layer norm trips the per-layer deltas instead
        let mut ledger = TelemetryLedger::new(1, addrs()).unwrap();
        ledger.record_epoch(snap(0, 0.0, 1.0, 1.0)).unwrap();
        ledger.record_epoch(snap(1, 1.0, 1.0, 1.0)).unwrap();
        assert!(ledger.layer_deltas_last_pair().is_err());
        // zero loss in the previous window is degenerate too
        let mut ledger = TelemetryLedger::new(1, addrs()).unwrap();
        ledger.record_epoch(snap(0, 1.0, 1.0, 0.0)).unwrap();
        ledger.record_epoch(snap(1, 1.0, 1.0, 1.0)).unwrap();
        assert!(ledger.window_deltas(2).is_err());
    }

    #[test]
    fn layer_deltas_last_pair_hand_arithmetic() {
        let mut ledger = TelemetryLedger::new(1, addrs()).unwrap();
        ledger.record_epoch(snap(0, 50.0, 100.0, 1.0)).unwrap();
        ledger.record_epoch(snap(1, 51.0, 100.2, 1.0)).unwrap();
        let d = ledger.layer_deltas_last_pair().unwrap();
        assert!((d[&ModuleAddress::new(0, ModuleRole::Query)] - 2.0).abs() < 1e-9);
        assert!((d[&ModuleAddress::new(1, ModuleRole::Query)] - 0.2).abs() < 1e-9);
        assert_eq!(d.len(), ledger.addresses().len());
    }

    #[test]
    fn layer_deltas_need_two_windows() {
        let mut ledger = TelemetryLedger::new(2, addrs()).unwrap();
        ledger.record_epoch(snap(0, 1.0, 1.0, 1.0)).unwrap();
        ledger.record_epoch(snap(1, 1.0, 1.0, 1.0)).unwrap();
        assert!(ledger.layer_deltas_last_pair().is_err());
    }

    #[test]
    fn replaying_the_same_stream_reproduces_windows() {
        let stream: Vec<EpochSnapshot> = (0..9)
            .map(|e| snap(e, 10.0 + e as f64, 20.0 - 0.5 * e as f64, 3.0 / (e + 1) as f64))
            .collect();
        let mut a = TelemetryLedger::new(3, addrs()).unwrap();
        let mut b = TelemetryLedger::new(3, addrs()).unwrap();
        for s in &stream {
            a.record_epoch(s.clone()).unwrap();
        }
        for s in &stream {
            b.record_epoch(s.clone()).unwrap();
        }
        assert_eq!(a.windows(), b.windows());
        assert_eq!(a.window_deltas(2).unwrap(), b.window_deltas(2).unwrap());
    }

    #[test]
    fn aggregation_consistency_against_raw_recomputation() {
        let stream: Vec<EpochSnapshot> = (0..6)
            .map(|e| snap(e, 1.0 + (e as f64).sqrt(), 4.0 - 0.3 * e as f64, 1.0 + e as f64))
            .collect();
        let mut ledger = TelemetryLedger::new(3, addrs()).unwrap();
        for s in &stream {
            ledger.record_epoch(s.clone()).unwrap();
        }
        for (wi, w) in ledger.windows().iter().enumerate() {
            let chunk = &stream[wi * 3..(wi + 1) * 3];
            for (addr, stored) in &w.layer_norms {
                let recomputed = chunk.iter().map(|s| s.layer_norms[addr]).sum::<f64>() / 3.0;
                assert!((stored - recomputed).abs() < 1e-12);
            }
            let role_mean: f64 = w.layer_norms.values().sum::<f64>() / w.layer_norms.len() as f64;
            assert!((w.module_norms[&ModuleRole::Query] - role_mean).abs() < 1e-12);
        }
    }
}
