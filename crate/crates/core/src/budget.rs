//! Dry-run parameter and memory calculator for arbitrary encoder dims.
//!
//! Answers "what would adapters cost on a model this big" without building
//! any tensors, so it works at full production scale.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lora::lora_param_count;
use crate::model::{ModuleAddress, ModuleRole};
use crate::planner::RankPlan;
use crate::report::MemoryEstimate;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BudgetDims {
    pub num_layers: usize,
    pub hidden_dim: usize,
    pub mlp_dim: usize,
    pub num_classes: usize,
    /// Parameters outside the encoder stack and head (input embeddings,
    /// position tables); counted into the full total only.
    pub extra_embedding_params: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BudgetReport {
    pub dims: BudgetDims,
    pub rank: usize,
    pub full_params: usize,
    pub adapter_params: usize,
    pub adapter_over_full: f64,
    pub per_role_adapter_params: BTreeMap<ModuleRole, usize>,
    pub memory_full_training: MemoryEstimate,
    pub memory_adapter_training: MemoryEstimate,
}

/// `(d_in, d_out)` of each target role at the given dims.
pub fn role_dims(dims: &BudgetDims, role: ModuleRole) -> (usize, usize) {
    let h = dims.hidden_dim;
    let m = dims.mlp_dim;
    match role {
        ModuleRole::Query | ModuleRole::Key | ModuleRole::Value => (h, h),
        ModuleRole::Dense => (h, m),
        ModuleRole::Output => (m, h),
    }
}

/// Full scalar count of the encoder stack, final norm, and head.
pub fn full_param_count(dims: &BudgetDims) -> usize {
    let h = dims.hidden_dim;
    let m = dims.mlp_dim;
    let block = 4 * (h * h + h)     // query, key, value, attention out
        + (h * m + m)               // dense
        + (m * h + h)               // output
        + 2 * (2 * h); // two layer norms
    dims.num_layers * block
        + 2 * h
        + (h * dims.num_classes + dims.num_classes)
        + dims.extra_embedding_params
}

pub fn compute(dims: &BudgetDims, rank: usize) -> Result<BudgetReport> {
    if dims.num_layers == 0 || dims.hidden_dim == 0 || dims.mlp_dim == 0 || dims.num_classes == 0 {
        return Err(Error::InvalidConfig {
            key: "budget".into(),
            reason: "all dimensions must be positive".into(),
        });
    }
    if rank == 0 {
        return Err(Error::InvalidConfig {
            key: "budget.rank".into(),
            reason: "rank must be positive".into(),
        });
    }

    let mut assignments = BTreeMap::new();
    let mut dim_map = BTreeMap::new();
    for layer in 0..dims.num_layers {
        for role in ModuleRole::ALL {
            let addr = ModuleAddress::new(layer, role);
            assignments.insert(addr, rank);
            dim_map.insert(addr, role_dims(dims, role));
        }
    }
    let plan = RankPlan::from_assignments(assignments);
    let adapter_params = lora_param_count(&plan, &dim_map)?;

    let mut per_role = BTreeMap::new();
    for role in ModuleRole::ALL {
        let (d_in, d_out) = role_dims(dims, role);
        per_role.insert(role, dims.num_layers * rank * (d_in + d_out));
    }

    let full_params = full_param_count(dims);
    Ok(BudgetReport {
        dims: *dims,
        rank,
        full_params,
        adapter_params,
        adapter_over_full: adapter_params as f64 / full_params as f64,
        per_role_adapter_params: per_role,
        memory_full_training: MemoryEstimate::compute(full_params, full_params),
        memory_adapter_training: MemoryEstimate::compute(full_params + adapter_params, adapter_params),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vit_large() -> BudgetDims {
        BudgetDims {
            num_layers: 24,
            hidden_dim: 1024,
            mlp_dim: 4096,
            num_classes: 1000,
            extra_embedding_params: 0,
        }
    }

    #[test]
    fn large_encoder_lands_near_300m() {
        let full = full_param_count(&vit_large());
        assert!((290_000_000..=310_000_000).contains(&full), "{full}");
    }

    #[test]
    fn rank_64_adapters_land_near_25m() {
        let report = compute(&vit_large(), 64).unwrap();
        // independent closed form: 24 * (3*64*2048 + 64*5120 + 64*5120)
        let expected = 24 * (3 * 64 * 2048 + 64 * 5120 + 64 * 5120);
        assert_eq!(report.adapter_params, expected);
        assert_eq!(report.adapter_params, 25_165_824);
        assert!((20_000_000..=35_000_000).contains(&report.adapter_params));
        assert!(report.adapter_over_full < 0.12, "{}", report.adapter_over_full);
    }

    #[test]
    fn adapter_count_linear_in_rank() {
        let at64 = compute(&vit_large(), 64).unwrap().adapter_params;
        let at8 = compute(&vit_large(), 8).unwrap().adapter_params;
        assert_eq!(at64, 8 * at8);
    }

    #[test]
    fn per_role_breakdown_sums_to_total() {
        let report = compute(&vit_large(), 32).unwrap();
        let sum: usize = report.per_role_adapter_params.values().sum();
        assert_eq!(sum, report.adapter_params);
    }

    #[test]
    fn zero_dims_rejected() {
        let mut dims = vit_large();
        dims.hidden_dim = 0;
        assert!(compute(&dims, 8).is_err());
    }
}
