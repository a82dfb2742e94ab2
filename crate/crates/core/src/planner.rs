//! Per-layer rank assignment from windowed weight-change magnitudes.
//!
//! Ranks live on a power-of-two ladder. Within each module role, the
//! per-layer absolute weight-norm changes are min-max normalized across
//! layers and the normalized value indexes into the ladder: still-moving
//! layers get wide adapters, settled layers get narrow ones.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModuleAddress, ModuleRole};

/// Ordered powers of two from `r_min` to `r_max` inclusive.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RankLadder {
    rungs: Vec<usize>,
}

/// What rank a role gets when every layer's delta is identical and
/// min-max normalization has zero range.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DegenerateRule {
    /// Treat a uniformly still-moving module as unconverged.
    #[default]
    MaxRank,
    MinRank,
}

impl RankLadder {
    pub fn rungs(&self) -> &[usize] {
        &self.rungs
    }

    pub fn r_min(&self) -> usize {
        self.rungs[0]
    }

    pub fn r_max(&self) -> usize {
        *self.rungs.last().expect("ladder is non-empty")
    }

    pub fn len(&self) -> usize {
        self.rungs.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Largest rung `<= cap`, if any.
    pub fn largest_rung_at_most(&self, cap: usize) -> Option<usize> {
        self.rungs.iter().rev().find(|&&r| r <= cap).copied()
    }
}

/// Enumerate powers of two between `r_min` and `r_max`.
pub fn build_ladder(r_min: usize, r_max: usize) -> Result<RankLadder> {
    for (key, v) in [("ranks.r_min", r_min), ("ranks.r_max", r_max)] {
        if v == 0 || !v.is_power_of_two() {
            return Err(Error::InvalidConfig {
                key: key.into(),
                reason: format!("{v} is not a positive power of two"),
            });
        }
    }
    if r_min > r_max {
        return Err(Error::InvalidConfig {
            key: "ranks.r_min".into(),
            reason: format!("r_min {r_min} exceeds r_max {r_max}"),
        });
    }
    let mut rungs = Vec::new();
    let mut r = r_min;
    while r <= r_max {
        rungs.push(r);
        r *= 2;
    }
    Ok(RankLadder { rungs })
}

/// Min-max scale to [0, 1]. A zero-range input maps everything to 1.0;
/// [`assign_ranks`] layers its degenerate rule on top of that.
pub fn minmax_normalize(values: &[f64]) -> Vec<f64> {
    let min = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max > min {
        values.iter().map(|v| (v - min) / (max - min)).collect()
    } else {
        vec![1.0; values.len()]
    }
}

/// Mapping from every target address to its assigned rank.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct RankPlan {
    assignments: BTreeMap<ModuleAddress, usize>,
}

impl RankPlan {
    pub fn from_assignments(assignments: BTreeMap<ModuleAddress, usize>) -> Self {
        RankPlan { assignments }
    }

    pub fn rank(&self, addr: ModuleAddress) -> Option<usize> {
        self.assignments.get(&addr).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ModuleAddress, usize)> + '_ {
        self.assignments.iter().map(|(a, r)| (*a, *r))
    }

    pub fn len(&self) -> usize {
        self.assignments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.assignments.is_empty()
    }

    pub fn addresses(&self) -> Vec<ModuleAddress> {
        self.assignments.keys().copied().collect()
    }

    /// Clamp every rank to the largest rung that fits min(d_in, d_out) of
    /// its layer. Returns the clamped addresses for logging.
    pub fn clamp_to_dims(
        &mut self,
        dims: &BTreeMap<ModuleAddress, (usize, usize)>,
        ladder: &RankLadder,
    ) -> Result<Vec<(ModuleAddress, usize, usize)>> {
        let mut clamped = Vec::new();
        for (addr, rank) in self.assignments.iter_mut() {
            let (d_in, d_out) = *dims.get(addr).ok_or_else(|| Error::PlanMissingAddress(addr.to_string()))?;
            let cap = d_in.min(d_out);
            if *rank > cap {
                let new = ladder.largest_rung_at_most(cap).ok_or_else(|| Error::RankTooLarge {
                    address: addr.to_string(),
                    rank: *rank,
                    limit: cap,
                })?;
                clamped.push((*addr, *rank, new));
                *rank = new;
            }
        }
        Ok(clamped)
    }
}

fn bucket_index(v: f64, rungs: usize) -> usize {
    if v == 0.0 {
        0
    } else {
        (v * rungs as f64).ceil() as usize - 1
    }
}

/// Assign each address a ladder rank from its absolute windowed weight
/// change. Normalization is per role, across that role's layers only.
pub fn assign_ranks(
    deltas: &BTreeMap<ModuleAddress, f64>,
    ladder: &RankLadder,
    degenerate: DegenerateRule,
) -> Result<RankPlan> {
    if deltas.is_empty() {
        return Err(Error::DegenerateTrace("empty delta set".into()));
    }
    let mut assignments = BTreeMap::new();
    for role in ModuleRole::ALL {
        let members: Vec<(ModuleAddress, f64)> = deltas
            .iter()
            .filter(|(a, _)| a.role == role)
            .map(|(a, d)| (*a, *d))
            .collect();
        if members.is_empty() {
            continue;
        }
        let raw: Vec<f64> = members.iter().map(|(_, d)| *d).collect();
        let min = raw.iter().cloned().fold(f64::INFINITY, f64::min);
        let max = raw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if max == min {
            let rank = match degenerate {
                DegenerateRule::MaxRank => ladder.r_max(),
                DegenerateRule::MinRank => ladder.r_min(),
            };
            for (addr, _) in members {
                assignments.insert(addr, rank);
            }
            continue;
        }
        let normalized = minmax_normalize(&raw);
        for ((addr, _), v) in members.into_iter().zip(normalized) {
            let idx = bucket_index(v, ladder.len());
            assignments.insert(addr, ladder.rungs()[idx]);
        }
    }
    Ok(RankPlan { assignments })
}
