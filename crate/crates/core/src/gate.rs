//! Partial-convergence test over the trailing windows of a telemetry ledger.
//!
//! The model counts as partially converged when, for every consecutive pair
//! among the most recent `k` windows, the absolute percentage change of
//! every target role's weight norm stays within `tau` and the absolute
//! percentage change of the loss stays within `zeta`. Equality passes;
//! only a strict exceedance fails. The loss check is per pair, not per
//! role, which changes nothing observable since loss is role-independent.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::TargetModuleSet;
use crate::telemetry::{deltas_between, EpochSnapshot, TelemetryLedger, WindowStats};

/// Gate hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceCriteria {
    /// Number of trailing windows examined; `k - 1` consecutive pairs.
    pub k: usize,
    /// Window size in epochs; mirrors the ledger's.
    pub m: usize,
    /// Weight-norm percent threshold.
    pub tau: f64,
    /// Loss percent threshold.
    pub zeta: f64,
    pub roles: TargetModuleSet,
}

impl ConvergenceCriteria {
    pub fn validate(&self) -> Result<()> {
        if self.k < 2 {
            return Err(Error::InvalidConfig {
                key: "gate.k".into(),
                reason: format!("k must be at least 2, got {}", self.k),
            });
        }
        if self.m == 0 {
            return Err(Error::InvalidConfig {
                key: "gate.m".into(),
                reason: "window size must be positive".into(),
            });
        }
        for (key, v) in [("gate.tau", self.tau), ("gate.zeta", self.zeta)] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::InvalidConfig {
                    key: key.into(),
                    reason: format!("threshold must be a positive finite float, got {v}"),
                });
            }
        }
        Ok(())
    }
}

/// Evaluate the gate over an explicit window sequence. Errors with
/// [`Error::NotReady`] until at least `k` windows exist.
pub fn evaluate_windows(windows: &[WindowStats], crit: &ConvergenceCriteria) -> Result<bool> {
    crit.validate()?;
    if windows.len() < crit.k {
        return Err(Error::NotReady {
            have: windows.len(),
            need: crit.k,
        });
    }
    let recent = &windows[windows.len() - crit.k..];
    for pair in recent.windows(2) {
        let deltas = deltas_between(&pair[0], &pair[1])?;
        if deltas.loss_delta_pct.abs() > crit.zeta {
            return Ok(false);
        }
        for role in crit.roles.roles() {
            let dw = deltas.module_deltas_pct.get(role).ok_or_else(|| {
                Error::DegenerateTrace(format!("window {} lacks role {role}", pair[1].index))
            })?;
            if dw.abs() > crit.tau {
                return Ok(false);
            }
        }
    }
    Ok(true)
}

/// Evaluate the gate over a ledger's closed windows.
pub fn evaluate(ledger: &TelemetryLedger, crit: &ConvergenceCriteria) -> Result<bool> {
    evaluate_windows(ledger.windows(), crit)
}

/// Replay a recorded epoch stream and return the earliest epoch at whose
/// window boundary the gate passes, or `None` if it never does.
pub fn first_pass_epoch(
    trace: &[EpochSnapshot],
    crit: &ConvergenceCriteria,
) -> Result<Option<usize>> {
    crit.validate()?;
    if trace.is_empty() {
        return Ok(None);
    }
    let addresses: Vec<_> = trace[0].layer_norms.keys().copied().collect();
    let mut ledger = TelemetryLedger::new(crit.m, addresses)?;
    for snap in trace {
        let closed = ledger.record_epoch(snap.clone())?;
        if closed.is_some() && ledger.windows().len() >= crit.k {
            if evaluate(&ledger, crit)? {
                return Ok(Some(snap.epoch));
            }
        }
    }
    Ok(None)
}

/// First window (1-based index) at which the gate passes over an
/// already-aggregated window sequence, scanning boundaries in order.
pub fn first_pass_window(
    windows: &[WindowStats],
    crit: &ConvergenceCriteria,
) -> Result<Option<usize>> {
    crit.validate()?;
    for end in crit.k..=windows.len() {
        if evaluate_windows(&windows[..end], crit)? {
            return Ok(Some(windows[end - 1].index));
        }
    }
    Ok(None)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModuleAddress, ModuleRole};
    use std::collections::BTreeMap;

    fn crit(k: usize, tau: f64, zeta: f64) -> ConvergenceCriteria {
        ConvergenceCriteria {
            k,
            m: 3,
            tau,
            zeta,
            roles: TargetModuleSet::full(),
        }
    }

    /// Window with every role at `norm` and the given loss.
    fn window(index: usize, norm: f64, loss: f64) -> WindowStats {
        let mut module_norms = BTreeMap::new();
        let mut layer_norms = BTreeMap::new();
        for role in ModuleRole::ALL {
            module_norms.insert(role, norm);
            layer_norms.insert(ModuleAddress::new(0, role), norm);
        }
        WindowStats {
            index,
            epoch_start: (index - 1) * 3,
            epoch_end: index * 3 - 1,
            module_norms,
            layer_norms,
            loss,
        }
    }

    fn window_with_role(index: usize, norm: f64, loss: f64, role: ModuleRole, role_norm: f64) -> WindowStats {
        let mut w = window(index, norm, loss);
        w.module_norms.insert(role, role_norm);
        w
    }

    #[test]
    fn constant_trace_passes() {
        let windows: Vec<_> = (1..=3).map(|i| window(i, 50.0, 2.0)).collect();
        assert!(evaluate_windows(&windows, &crit(3, 0.5, 2.5)).unwrap());
    }

    #[test]
    fn single_role_violation_fails_exp2() {
        // one role moves 0.6% in one pair; tau = 0.50 under the middle setting
        let windows = vec![
            window(1, 100.0, 2.0),
            window_with_role(2, 100.0, 2.0, ModuleRole::Value, 100.6),
            window_with_role(3, 100.0, 2.0, ModuleRole::Value, 100.6),
        ];
        assert!(!evaluate_windows(&windows, &crit(3, 0.50, 2.50)).unwrap());
    }

    #[test]
    fn same_trace_relaxed_passes_strict_fails() {
        // max |dW| = 0.9, max |dL| = 4.0 across the pairs
        let windows = vec![
            window(1, 100.0, 2.0),
            window(2, 100.9, 1.92),
            window(3, 100.9, 1.92),
        ];
        assert!(evaluate_windows(&windows, &crit(3, 1.00, 5.00)).unwrap());
        assert!(!evaluate_windows(&windows, &crit(3, 0.25, 1.00)).unwrap());
    }

    #[test]
    fn equality_with_threshold_passes() {
        // |dW| exactly tau must not fail: strict inequality on exceedance
        let windows = vec![window(1, 100.0, 2.0), window(2, 100.5, 2.0)];
        assert!(evaluate_windows(&windows, &crit(2, 0.5, 2.5)).unwrap());
    }

    #[test]
    fn loss_violation_fails_even_with_still_norms() {
        let windows = vec![window(1, 100.0, 2.0), window(2, 100.0, 1.8)];
        // loss change is -10%
        assert!(!evaluate_windows(&windows, &crit(2, 0.5, 2.5)).unwrap());
        assert!(evaluate_windows(&windows, &crit(2, 0.5, 15.0)).unwrap());
    }

    #[test]
    fn not_ready_before_k_windows() {
        let windows = vec![window(1, 100.0, 2.0), window(2, 100.0, 2.0)];
        assert!(matches!(
            evaluate_windows(&windows, &crit(3, 0.5, 2.5)),
            Err(Error::NotReady { have: 2, need: 3 })
        ));
    }

    #[test]
    fn only_trailing_k_windows_are_examined() {
        // wild history, calm recent k: decision must ignore the history
        let mut windows = vec![window(1, 10.0, 9.0), window(2, 90.0, 1.0)];
        for i in 3..=5 {
            windows.push(window(i, 100.0, 0.5));
        }
        assert!(evaluate_windows(&windows, &crit(3, 0.5, 2.5)).unwrap());
    }

    #[test]
    fn k_must_be_at_least_two() {
        let windows = vec![window(1, 1.0, 1.0)];
        assert!(evaluate_windows(&windows, &crit(1, 0.5, 2.5)).is_err());
    }

    #[test]
    fn threshold_monotonicity_on_random_traces() {
        let mut state = 0xabcdef12345u64;
        let mut next = move || {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            (state >> 11) as f64 / (1u64 << 53) as f64
        };
        for _ in 0..200 {
            let n = 3 + (next() * 4.0) as usize;
            let mut norm = 50.0 + next() * 100.0;
            let mut loss = 1.0 + next() * 3.0;
            let mut windows = Vec::new();
            for i in 1..=n {
                norm *= 1.0 + (next() - 0.5) * 0.02;
                loss *= 1.0 + (next() - 0.5) * 0.05;
                windows.push(window(i, norm, loss));
            }
            let tight = crit(3, 0.2 + next(), 1.0 + next());
            let loose = ConvergenceCriteria {
                tau: tight.tau * (1.0 + next()),
                zeta: tight.zeta * (1.0 + next()),
                ..tight.clone()
            };
            if evaluate_windows(&windows, &tight).unwrap() {
                assert!(evaluate_windows(&windows, &loose).unwrap());
            }
        }
    }

    // ---- replay over epoch streams ----

    fn constant_trace(epochs: usize) -> Vec<EpochSnapshot> {
        (0..epochs)
            .map(|e| {
                let mut layer_norms = BTreeMap::new();
                for role in ModuleRole::ALL {
                    layer_norms.insert(ModuleAddress::new(0, role), 10.0);
                }
                EpochSnapshot {
                    epoch: e,
                    layer_norms,
                    loss: 1.0,
                }
            })
            .collect()
    }

    #[test]
    fn constant_trace_first_pass_at_km_minus_one() {
        let trace = constant_trace(15);
        let c = crit(3, 0.5, 2.5);
        assert_eq!(first_pass_epoch(&trace, &c).unwrap(), Some(8));
    }

    #[test]
    fn violating_trace_never_passes() {
        let mut trace = constant_trace(18);
        for (e, snap) in trace.iter_mut().enumerate() {
            let norm = 10.0 * 1.05f64.powi(e as i32); // 5% per epoch, far over tau
            for v in snap.layer_norms.values_mut() {
                *v = norm;
            }
        }
        assert_eq!(first_pass_epoch(&trace, &crit(3, 0.5, 2.5)).unwrap(), None);
    }

    #[test]
    fn flattening_trace_matches_brute_force_boundary_scan() {
        // per-window norm growth halves each window, starting at 4%
        let m = 3;
        let mut trace = Vec::new();
        let mut norm = 100.0;
        for e in 0..10 * m {
            if e > 0 && e % m == 0 {
                let win = e / m;
                norm *= 1.0 + 0.04 / 2f64.powi(win as i32 - 1);
            }
            let mut layer_norms = BTreeMap::new();
            for role in ModuleRole::ALL {
                layer_norms.insert(ModuleAddress::new(0, role), norm);
            }
            trace.push(EpochSnapshot {
                epoch: e,
                layer_norms,
                loss: 1.0,
            });
        }
        let c = crit(3, 0.5, 2.5);
        let got = first_pass_epoch(&trace, &c).unwrap();

        // brute force: rebuild a ledger per boundary prefix and evaluate
        let mut expected = None;
        'outer: for boundary in 1..=trace.len() {
            if boundary % m != 0 {
                continue;
            }
            let addresses: Vec<_> = trace[0].layer_norms.keys().copied().collect();
            let mut ledger = TelemetryLedger::new(m, addresses).unwrap();
            for snap in &trace[..boundary] {
                ledger.record_epoch(snap.clone()).unwrap();
            }
            if ledger.windows().len() >= c.k && evaluate(&ledger, &c).unwrap() {
                expected = Some(boundary - 1);
                break 'outer;
            }
        }
        assert_eq!(got, expected);
        assert!(got.is_some());
    }

    #[test]
    fn first_pass_window_reports_one_based_index() {
        let mut windows = vec![window(1, 100.0, 2.0), window(2, 110.0, 1.5)];
        for i in 3..=6 {
            windows.push(window(i, 110.0, 1.5));
        }
        let c = crit(3, 0.5, 2.5);
        assert_eq!(first_pass_window(&windows, &c).unwrap(), Some(4));
    }
}
