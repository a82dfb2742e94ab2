//! Adapter injection, base freezing, and merge arithmetic.
//!
//! An adapter on a `d_out x d_in` linear is the pair `A: r x d_in`,
//! `B: d_out x r`; the layer computes `W x + bias + s * B * (A x)`.
//! `B` starts at zero so injection cannot move the model's outputs.

use std::collections::BTreeMap;

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::model::{AdapterParams, Model, ModuleAddress};
use crate::params::ParamId;
use crate::planner::RankPlan;
use crate::tensor::{matmul, Tensor};

/// Attach an adapter to every address in `plan`. The plan must cover
/// exactly the model's enumerable targets for the roles it mentions, and
/// every rank must fit within min(d_in, d_out) of its layer.
pub fn inject(model: &mut Model, plan: &RankPlan, scaling: f64, seed: u64) -> Result<()> {
    if scaling <= 0.0 || !scaling.is_finite() {
        return Err(Error::InvalidConfig {
            key: "ranks.scaling".into(),
            reason: format!("scaling must be a positive finite float, got {scaling}"),
        });
    }
    let mut roles = Vec::new();
    for addr in plan.addresses() {
        if !roles.contains(&addr.role) {
            roles.push(addr.role);
        }
    }
    let roles = crate::model::TargetModuleSet::new(roles)?;
    let expected = model.enumerate_targets(&roles);
    let planned = plan.addresses();
    for addr in &expected {
        if plan.rank(*addr).is_none() {
            return Err(Error::PlanMissingAddress(addr.to_string()));
        }
    }
    if planned.len() != expected.len() {
        let extra = planned
            .iter()
            .find(|a| !expected.contains(a))
            .map(|a| a.to_string())
            .unwrap_or_default();
        return Err(Error::PlanMissingAddress(format!(
            "plan addresses an unknown target {extra}"
        )));
    }

    let mut rng = StdRng::seed_from_u64(seed);
    let mut adapters = BTreeMap::new();
    for (addr, rank) in plan.iter() {
        let (d_in, d_out) = model.target_dims(addr);
        let cap = d_in.min(d_out);
        if rank == 0 || rank > cap {
            return Err(Error::RankTooLarge {
                address: addr.to_string(),
                rank,
                limit: cap,
            });
        }
        let sigma = 1.0 / rank as f64;
        let a_data: Vec<f64> = (0..rank * d_in)
            .map(|_| {
                let z: f64 = rng.sample(StandardNormal);
                z * sigma
            })
            .collect();
        let a = model.store.register(
            format!("{addr}.lora_a"),
            Tensor::new(vec![rank, d_in], a_data)?,
            true,
        );
        let b = model.store.register(
            format!("{addr}.lora_b"),
            Tensor::zeros(vec![d_out, rank]),
            true,
        );
        adapters.insert(
            addr,
            AdapterParams {
                a,
                b,
                rank,
                scaling,
            },
        );
    }
    *model.adapters_mut() = adapters;
    Ok(())
}

/// Set `requires_grad = false` on every non-adapter parameter, embeddings
/// and classifier head included. Only the factor pairs stay trainable.
pub fn freeze_base(model: &mut Model) {
    let adapter_ids: Vec<ParamId> = model
        .adapters()
        .values()
        .flat_map(|ad| [ad.a, ad.b])
        .collect();
    let ids: Vec<ParamId> = model.store.ids().collect();
    for id in ids {
        if !adapter_ids.contains(&id) {
            model.store.set_requires_grad(id, false);
        }
    }
}

/// `W + s * B * A` without mutating anything.
pub fn merged_weight(w: &Tensor, a: &Tensor, b: &Tensor, scaling: f64) -> Tensor {
    let (rank, d_in) = a.dims2();
    let (d_out, _) = b.dims2();
    let ba = matmul(b.data(), a.data(), d_out, rank, d_in);
    let data: Vec<f64> = w
        .data()
        .iter()
        .zip(ba.iter())
        .map(|(wv, uv)| wv + scaling * uv)
        .collect();
    Tensor::new(w.shape().to_vec(), data).expect("merge preserves shape")
}

/// Trainable scalars an adapter set adds: sum of `r * (d_in + d_out)`.
pub fn lora_param_count(
    plan: &RankPlan,
    dims: &BTreeMap<ModuleAddress, (usize, usize)>,
) -> Result<usize> {
    if plan.len() != dims.len() {
        return Err(Error::PlanMissingAddress(format!(
            "plan has {} addresses, dims map has {}",
            plan.len(),
            dims.len()
        )));
    }
    let mut total = 0usize;
    for (addr, rank) in plan.iter() {
        let (d_in, d_out) = dims
            .get(&addr)
            .ok_or_else(|| Error::PlanMissingAddress(addr.to_string()))?;
        total += rank * (d_in + d_out);
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Graph;
    use crate::model::{build_model, ModelConfig, ModuleRole, TargetModuleSet};
    use crate::planner::{assign_ranks, build_ladder, DegenerateRule};

    fn desk_model() -> Model {
        build_model(&ModelConfig::default()).unwrap()
    }

    fn uniform_plan(model: &Model, rank: usize) -> RankPlan {
        let assignments = model
            .enumerate_targets(&TargetModuleSet::full())
            .into_iter()
            .map(|a| (a, rank))
            .collect();
        RankPlan::from_assignments(assignments)
    }

    fn random_batch(model: &Model, batch: usize, seed: u64) -> Tensor {
        use rand::Rng;
        let mut rng = StdRng::seed_from_u64(seed);
        let dim = model.config().input_dim;
        Tensor::new(
            vec![batch, dim],
            (0..batch * dim).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn injection_leaves_logits_bit_for_bit() {
        let mut model = desk_model();
        let x = random_batch(&model, 6, 3);
        let mut g = Graph::new();
        let out = model.logits(&mut g, x.clone()).unwrap();
        let before = g.value(out).clone();

        let plan = uniform_plan(&model, 8);
        inject(&mut model, &plan, 1.0, 77).unwrap();
        let mut g = Graph::new();
        let out = model.logits(&mut g, x).unwrap();
        let after = g.value(out).clone();

        for (a, b) in before.data().iter().zip(after.data()) {
            assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn rank_eight_adapter_on_64x64_layer_adds_1024_scalars() {
        let mut model = desk_model();
        let before = model.parameter_count(false);
        let set = TargetModuleSet::new(vec![ModuleRole::Query]).unwrap();
        let assignments = model
            .enumerate_targets(&set)
            .into_iter()
            .map(|a| (a, 8))
            .collect();
        inject(&mut model, &RankPlan::from_assignments(assignments), 1.0, 0).unwrap();
        // four layers, 8 * (64 + 64) each
        assert_eq!(model.parameter_count(false) - before, 4 * 1024);
    }

    #[test]
    fn desk_rank8_adapter_total_is_32768() {
        // per-address closed-form oracle
        let mut model = desk_model();
        let plan = uniform_plan(&model, 8);
        let dims: BTreeMap<_, _> = plan
            .addresses()
            .into_iter()
            .map(|a| (a, model.target_dims(a)))
            .collect();
        let mut oracle = 0;
        for (addr, rank) in plan.iter() {
            let (d_in, d_out) = dims[&addr];
            oracle += rank * (d_in + d_out);
        }
        assert_eq!(oracle, 32_768);
        assert_eq!(lora_param_count(&plan, &dims).unwrap(), 32_768);

        let before = model.parameter_count(false);
        inject(&mut model, &plan, 1.0, 5).unwrap();
        assert_eq!(model.parameter_count(false) - before, 32_768);
    }

    #[test]
    fn freeze_leaves_only_adapters_trainable() {
        let mut model = desk_model();
        let plan = uniform_plan(&model, 8);
        inject(&mut model, &plan, 1.0, 5).unwrap();
        freeze_base(&mut model);
        assert_eq!(model.parameter_count(true), 32_768);

        let x = random_batch(&model, 4, 11);
        let mut g = Graph::new();
        let (loss, _) = model.loss(&mut g, x, &[0, 1, 2, 3]).unwrap();
        let grads = g.backward(loss).unwrap();
        let adapter_ids: Vec<ParamId> = model.adapters().values().flat_map(|a| [a.a, a.b]).collect();
        assert_eq!(grads.len(), adapter_ids.len());
        for (id, _) in grads.iter() {
            assert!(adapter_ids.contains(&id), "unexpected gradient for {}", model.store.name(id));
        }
    }

    #[test]
    fn merge_with_zero_b_returns_w_exactly() {
        let w = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let a = Tensor::new(vec![1, 2], vec![0.5, -0.5]).unwrap();
        let b = Tensor::zeros(vec![2, 1]);
        assert!(merged_weight(&w, &a, &b, 1.0).bits_eq(&w));
    }

    #[test]
    fn rank_one_outer_product_of_ones() {
        let w = Tensor::zeros(vec![3, 2]);
        let a = Tensor::new(vec![1, 2], vec![1.0, 1.0]).unwrap();
        let b = Tensor::new(vec![3, 1], vec![1.0, 1.0, 1.0]).unwrap();
        let merged = merged_weight(&w, &a, &b, 1.0);
        assert_eq!(merged.data(), &[1.0; 6]);
    }

    #[test]
    fn merged_forward_matches_adapted_forward() {
        let mut model = desk_model();
        let plan = uniform_plan(&model, 8);
        inject(&mut model, &plan, 1.0, 123).unwrap();
        // push nonzero values into the B factors so the adapters matter
        let adapter_ids: Vec<ParamId> = model.adapters().values().map(|a| a.b).collect();
        let mut rng = StdRng::seed_from_u64(9);
        for id in adapter_ids {
            for v in model.store.value_mut(id).data_mut() {
                *v = rng.gen_range(-0.05..0.05);
            }
        }
        let x = random_batch(&model, 5, 21);
        let mut g = Graph::new();
        let out = model.logits(&mut g, x.clone()).unwrap();
        let adapted = g.value(out).clone();

        // fold every adapter into its base weight, then drop the adapters
        let addrs: Vec<ModuleAddress> = model.adapters().keys().copied().collect();
        for addr in addrs {
            let merged = model.effective_weight(addr);
            let wid = model.target_weight_id(addr);
            *model.store.value_mut(wid) = merged;
        }
        model.adapters_mut().clear();
        let mut g = Graph::new();
        let out = model.logits(&mut g, x).unwrap();
        let plain = g.value(out).clone();

        for (a, b) in adapted.data().iter().zip(plain.data()) {
            assert!((a - b).abs() < 1e-10, "{a} vs {b}");
        }
    }

    #[test]
    fn lora_count_scales_linearly_in_rank() {
        let model = desk_model();
        let plan8 = uniform_plan(&model, 8);
        let plan16 = uniform_plan(&model, 16);
        let dims: BTreeMap<_, _> = plan8
            .addresses()
            .into_iter()
            .map(|a| (a, model.target_dims(a)))
            .collect();
        assert_eq!(
            2 * lora_param_count(&plan8, &dims).unwrap(),
            lora_param_count(&plan16, &dims).unwrap()
        );
    }

    #[test]
    fn empty_plan_counts_zero() {
        assert_eq!(
            lora_param_count(&RankPlan::default(), &BTreeMap::new()).unwrap(),
            0
        );
    }

    #[test]
    fn mismatched_dims_rejected() {
        let model = desk_model();
        let plan = uniform_plan(&model, 8);
        assert!(lora_param_count(&plan, &BTreeMap::new()).is_err());
    }

    #[test]
    fn inject_rejects_incomplete_plan() {
        let mut model = desk_model();
        let mut assignments: BTreeMap<ModuleAddress, usize> = uniform_plan(&model, 8)
            .iter()
            .collect();
        assignments.remove(&ModuleAddress::new(2, ModuleRole::Dense));
        let err = inject(&mut model, &RankPlan::from_assignments(assignments), 1.0, 0).unwrap_err();
        assert!(err.to_string().contains("layer2.dense"));
    }

    #[test]
    fn inject_rejects_oversized_rank() {
        let mut model = desk_model();
        let plan = uniform_plan(&model, 128);
        assert!(matches!(
            inject(&mut model, &plan, 1.0, 0),
            Err(Error::RankTooLarge { .. })
        ));
    }

    #[test]
    fn planner_output_injects_cleanly() {
        let mut model = desk_model();
        let ladder = build_ladder(8, 64).unwrap();
        let deltas: BTreeMap<ModuleAddress, f64> = model
            .enumerate_targets(&TargetModuleSet::full())
            .into_iter()
            .enumerate()
            .map(|(i, a)| (a, 0.1 * (i as f64 + 1.0)))
            .collect();
        let plan = assign_ranks(&deltas, &ladder, DegenerateRule::MaxRank).unwrap();
        inject(&mut model, &plan, 1.0, 1).unwrap();
        assert_eq!(model.adapters().len(), 20);
    }
}
