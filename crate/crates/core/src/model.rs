//! Transformer encoder classifier with addressable adapter targets.
//!
//! The encoder takes a flat feature vector per example, projects it into a
//! short token sequence, runs pre-norm attention/MLP blocks over it, and
//! classifies from the mean-pooled final state. Five linear sublayers per
//! block are adapter targets: the query/key/value projections and the two
//! MLP linears ("dense" expands, "output" projects back). The attention
//! output projection is deliberately not a target.

use std::collections::BTreeMap;
use std::fmt;

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{frobenius_norm, Tensor};

pub const LAYER_NORM_EPS: f64 = 1e-5;
const INIT_STD: f64 = 0.02;

/// Adapter-eligible sublayer roles, in canonical order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModuleRole {
    Query,
    Key,
    Value,
    Dense,
    Output,
}

impl ModuleRole {
    pub const ALL: [ModuleRole; 5] = [
        ModuleRole::Query,
        ModuleRole::Key,
        ModuleRole::Value,
        ModuleRole::Dense,
        ModuleRole::Output,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ModuleRole::Query => "query",
            ModuleRole::Key => "key",
            ModuleRole::Value => "value",
            ModuleRole::Dense => "dense",
            ModuleRole::Output => "output",
        }
    }

    pub fn parse(s: &str) -> Result<ModuleRole> {
        match s {
            "query" | "q" => Ok(ModuleRole::Query),
            "key" | "k" => Ok(ModuleRole::Key),
            "value" | "v" => Ok(ModuleRole::Value),
            "dense" | "d" => Ok(ModuleRole::Dense),
            "output" | "o" => Ok(ModuleRole::Output),
            other => Err(Error::InvalidConfig {
                key: "roles".into(),
                reason: format!("unknown module role `{other}`"),
            }),
        }
    }
}

impl fmt::Display for ModuleRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// One adapter target: a layer index plus the sublayer role within it.
/// Serializes as the string `layer<index>.<role>` so it can key JSON maps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ModuleAddress {
    pub layer: usize,
    pub role: ModuleRole,
}

impl ModuleAddress {
    pub fn new(layer: usize, role: ModuleRole) -> Self {
        ModuleAddress { layer, role }
    }
}

impl fmt::Display for ModuleAddress {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "layer{}.{}", self.layer, self.role)
    }
}

impl std::str::FromStr for ModuleAddress {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let rest = s.strip_prefix("layer").ok_or_else(|| Error::InvalidConfig {
            key: "address".into(),
            reason: format!("expected `layer<index>.<role>`, got `{s}`"),
        })?;
        let (layer, role) = rest.split_once('.').ok_or_else(|| Error::InvalidConfig {
            key: "address".into(),
            reason: format!("expected `layer<index>.<role>`, got `{s}`"),
        })?;
        let layer = layer.parse::<usize>().map_err(|_| Error::InvalidConfig {
            key: "address".into(),
            reason: format!("bad layer index in `{s}`"),
        })?;
        Ok(ModuleAddress::new(layer, ModuleRole::parse(role)?))
    }
}

impl Serialize for ModuleAddress {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for ModuleAddress {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Ordered, duplicate-free set of target roles.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TargetModuleSet {
    roles: Vec<ModuleRole>,
}

impl TargetModuleSet {
    pub fn new(roles: Vec<ModuleRole>) -> Result<Self> {
        if roles.is_empty() {
            return Err(Error::InvalidConfig {
                key: "roles".into(),
                reason: "target module set must be non-empty".into(),
            });
        }
        let mut seen = Vec::new();
        for r in &roles {
            if seen.contains(r) {
                return Err(Error::InvalidConfig {
                    key: "roles".into(),
                    reason: format!("duplicate role `{r}`"),
                });
            }
            seen.push(*r);
        }
        Ok(TargetModuleSet { roles })
    }

    /// All five roles in canonical order.
    pub fn full() -> Self {
        TargetModuleSet {
            roles: ModuleRole::ALL.to_vec(),
        }
    }

    pub fn roles(&self) -> &[ModuleRole] {
        &self.roles
    }

    pub fn contains(&self, role: ModuleRole) -> bool {
        self.roles.contains(&role)
    }

    pub fn len(&self) -> usize {
        self.roles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.roles.is_empty()
    }
}

impl Default for TargetModuleSet {
    fn default() -> Self {
        TargetModuleSet::full()
    }
}

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub hidden_dim: usize,
    pub num_heads: usize,
    pub mlp_dim: usize,
    pub num_classes: usize,
    pub input_dim: usize,
    /// Token count the input projection fans the feature vector out to.
    pub num_tokens: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            num_layers: 4,
            hidden_dim: 64,
            num_heads: 4,
            mlp_dim: 256,
            num_classes: 10,
            input_dim: 64,
            num_tokens: 4,
            seed: 42,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("model.num_layers", self.num_layers),
            ("model.hidden_dim", self.hidden_dim),
            ("model.num_heads", self.num_heads),
            ("model.mlp_dim", self.mlp_dim),
            ("model.num_classes", self.num_classes),
            ("model.input_dim", self.input_dim),
            ("model.num_tokens", self.num_tokens),
        ];
        for (key, v) in positive {
            if v == 0 {
                return Err(Error::InvalidConfig {
                    key: key.into(),
                    reason: "must be positive".into(),
                });
            }
        }
        if self.hidden_dim % self.num_heads != 0 {
            return Err(Error::InvalidConfig {
                key: "model.hidden_dim".into(),
                reason: format!(
                    "hidden_dim {} not divisible by num_heads {}",
                    self.hidden_dim, self.num_heads
                ),
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct BlockParams {
    ln1_gamma: ParamId,
    ln1_beta: ParamId,
    query_w: ParamId,
    query_b: ParamId,
    key_w: ParamId,
    key_b: ParamId,
    value_w: ParamId,
    value_b: ParamId,
    attn_out_w: ParamId,
    attn_out_b: ParamId,
    ln2_gamma: ParamId,
    ln2_beta: ParamId,
    dense_w: ParamId,
    dense_b: ParamId,
    output_w: ParamId,
    output_b: ParamId,
}

/// Low-rank factor pair attached to one target layer.
#[derive(Debug, Clone)]
pub struct AdapterParams {
    pub a: ParamId,
    pub b: ParamId,
    pub rank: usize,
    pub scaling: f64,
}

/// The encoder classifier plus its parameter store and any injected adapters.
#[derive(Debug)]
pub struct Model {
    cfg: ModelConfig,
    pub store: ParamStore,
    input_w: ParamId,
    input_b: ParamId,
    pos_emb: ParamId,
    blocks: Vec<BlockParams>,
    final_gamma: ParamId,
    final_beta: ParamId,
    head_w: ParamId,
    head_b: ParamId,
    adapters: BTreeMap<ModuleAddress, AdapterParams>,
}

fn trunc_normal(rng: &mut StdRng, std: f64) -> f64 {
    // resample outside two standard deviations
    loop {
        let z: f64 = rng.sample(StandardNormal);
        if z.abs() <= 2.0 {
            return z * std;
        }
    }
}

fn init_weight(rng: &mut StdRng, rows: usize, cols: usize) -> Tensor {
    let data: Vec<f64> = (0..rows * cols).map(|_| trunc_normal(rng, INIT_STD)).collect();
    Tensor::new(vec![rows, cols], data).expect("sized to shape")
}

/// Build the model with deterministic initialization from `cfg.seed`.
pub fn build_model(cfg: &ModelConfig) -> Result<Model> {
    cfg.validate()?;
    let mut store = ParamStore::new();
    let mut rng = StdRng::seed_from_u64(cfg.seed);
    let h = cfg.hidden_dim;
    let t = cfg.num_tokens;

    let input_w = store.register("input_proj.weight", init_weight(&mut rng, t * h, cfg.input_dim), true);
    let input_b = store.register("input_proj.bias", Tensor::zeros(vec![t * h]), true);
    let pos_emb = store.register("pos_embedding", init_weight(&mut rng, t, h), true);

    let mut blocks = Vec::with_capacity(cfg.num_layers);
    for l in 0..cfg.num_layers {
        let p = |s: &str| format!("layer{l}.{s}");
        blocks.push(BlockParams {
            ln1_gamma: store.register(p("ln1.gamma"), Tensor::new(vec![h], vec![1.0; h])?, true),
            ln1_beta: store.register(p("ln1.beta"), Tensor::zeros(vec![h]), true),
            query_w: store.register(p("attn.query.weight"), init_weight(&mut rng, h, h), true),
            query_b: store.register(p("attn.query.bias"), Tensor::zeros(vec![h]), true),
            key_w: store.register(p("attn.key.weight"), init_weight(&mut rng, h, h), true),
            key_b: store.register(p("attn.key.bias"), Tensor::zeros(vec![h]), true),
            value_w: store.register(p("attn.value.weight"), init_weight(&mut rng, h, h), true),
            value_b: store.register(p("attn.value.bias"), Tensor::zeros(vec![h]), true),
            attn_out_w: store.register(p("attn.out.weight"), init_weight(&mut rng, h, h), true),
            attn_out_b: store.register(p("attn.out.bias"), Tensor::zeros(vec![h]), true),
            ln2_gamma: store.register(p("ln2.gamma"), Tensor::new(vec![h], vec![1.0; h])?, true),
            ln2_beta: store.register(p("ln2.beta"), Tensor::zeros(vec![h]), true),
            dense_w: store.register(p("mlp.dense.weight"), init_weight(&mut rng, cfg.mlp_dim, h), true),
            dense_b: store.register(p("mlp.dense.bias"), Tensor::zeros(vec![cfg.mlp_dim]), true),
            output_w: store.register(p("mlp.output.weight"), init_weight(&mut rng, h, cfg.mlp_dim), true),
            output_b: store.register(p("mlp.output.bias"), Tensor::zeros(vec![h]), true),
        });
    }

    let final_gamma = store.register("final_ln.gamma", Tensor::new(vec![h], vec![1.0; h])?, true);
    let final_beta = store.register("final_ln.beta", Tensor::zeros(vec![h]), true);
    let head_w = store.register("head.weight", init_weight(&mut rng, cfg.num_classes, h), true);
    let head_b = store.register("head.bias", Tensor::zeros(vec![cfg.num_classes]), true);

    Ok(Model {
        cfg: cfg.clone(),
        store,
        input_w,
        input_b,
        pos_emb,
        blocks,
        final_gamma,
        final_beta,
        head_w,
        head_b,
        adapters: BTreeMap::new(),
    })
}

impl Model {
    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn adapters(&self) -> &BTreeMap<ModuleAddress, AdapterParams> {
        &self.adapters
    }

    pub fn adapters_mut(&mut self) -> &mut BTreeMap<ModuleAddress, AdapterParams> {
        &mut self.adapters
    }

    pub fn is_adapted(&self) -> bool {
        !self.adapters.is_empty()
    }

    /// Addresses of adapter targets, ordered by layer then canonical role.
    pub fn enumerate_targets(&self, roles: &TargetModuleSet) -> Vec<ModuleAddress> {
        let mut out = Vec::with_capacity(self.cfg.num_layers * roles.len());
        for layer in 0..self.cfg.num_layers {
            for role in ModuleRole::ALL {
                if roles.contains(role) {
                    out.push(ModuleAddress::new(layer, role));
                }
            }
        }
        out
    }

    /// `(d_in, d_out)` of the target linear at `addr`.
    pub fn target_dims(&self, addr: ModuleAddress) -> (usize, usize) {
        let h = self.cfg.hidden_dim;
        let m = self.cfg.mlp_dim;
        match addr.role {
            ModuleRole::Query | ModuleRole::Key | ModuleRole::Value => (h, h),
            ModuleRole::Dense => (h, m),
            ModuleRole::Output => (m, h),
        }
    }

    pub fn target_weight_id(&self, addr: ModuleAddress) -> ParamId {
        let b = &self.blocks[addr.layer];
        match addr.role {
            ModuleRole::Query => b.query_w,
            ModuleRole::Key => b.key_w,
            ModuleRole::Value => b.value_w,
            ModuleRole::Dense => b.dense_w,
            ModuleRole::Output => b.output_w,
        }
    }

    /// Exact scalar parameter count, optionally trainable-only.
    pub fn parameter_count(&self, trainable_only: bool) -> usize {
        self.store.scalar_count(trainable_only)
    }

    /// Frobenius norm of the functional weight at each requested target:
    /// the base matrix, plus the adapter product once one is attached.
    /// Biases are excluded.
    pub fn target_norms(&self, roles: &TargetModuleSet) -> BTreeMap<ModuleAddress, f64> {
        self.enumerate_targets(roles)
            .into_iter()
            .map(|addr| (addr, frobenius_norm(&self.effective_weight(addr))))
            .collect()
    }

    /// `W + s * B * A` when an adapter is attached, otherwise a copy of `W`.
    pub fn effective_weight(&self, addr: ModuleAddress) -> Tensor {
        let w = self.store.value(self.target_weight_id(addr));
        match self.adapters.get(&addr) {
            None => w.clone(),
            Some(ad) => crate::lora::merged_weight(
                w,
                self.store.value(ad.a),
                self.store.value(ad.b),
                ad.scaling,
            ),
        }
    }

    fn adapted_linear(
        &self,
        g: &mut Graph,
        x: NodeId,
        w: ParamId,
        b: ParamId,
        addr: ModuleAddress,
    ) -> Result<NodeId> {
        let wn = g.param(&self.store, w);
        let bn = g.param(&self.store, b);
        let base = g.matmul_nt(x, wn)?;
        let mut y = g.add_bias(base, bn)?;
        if let Some(ad) = self.adapters.get(&addr) {
            let an = g.param(&self.store, ad.a);
            let bn2 = g.param(&self.store, ad.b);
            let xa = g.matmul_nt(x, an)?;
            let xab = g.matmul_nt(xa, bn2)?;
            let scaled = g.scale(xab, ad.scaling);
            y = g.add(y, scaled)?;
        }
        Ok(y)
    }

    fn linear(&self, g: &mut Graph, x: NodeId, w: ParamId, b: ParamId) -> Result<NodeId> {
        let wn = g.param(&self.store, w);
        let bn = g.param(&self.store, b);
        let y = g.matmul_nt(x, wn)?;
        g.add_bias(y, bn)
    }

    /// Forward pass: `batch x input_dim` features to `batch x num_classes` logits.
    pub fn logits(&self, g: &mut Graph, x: Tensor) -> Result<NodeId> {
        let (batch, in_dim) = x.dims2();
        if in_dim != self.cfg.input_dim {
            return Err(Error::ShapeMismatch {
                op: "model_forward",
                lhs: x.shape().to_vec(),
                rhs: vec![self.cfg.input_dim],
            });
        }
        let t = self.cfg.num_tokens;
        let h = self.cfg.hidden_dim;

        let xin = g.input(x);
        let proj = self.linear(g, xin, self.input_w, self.input_b)?;
        let mut state = g.reshape(proj, vec![batch * t, h])?;

        let pos_indices: Vec<usize> = (0..batch * t).map(|i| i % t).collect();
        let table = g.param(&self.store, self.pos_emb);
        let pos = g.embedding(table, &pos_indices)?;
        state = g.add(state, pos)?;

        for (l, blk) in self.blocks.iter().enumerate() {
            let g1 = g.param(&self.store, blk.ln1_gamma);
            let b1 = g.param(&self.store, blk.ln1_beta);
            let normed = g.layer_norm(state, g1, b1, LAYER_NORM_EPS)?;

            let q = self.adapted_linear(g, normed, blk.query_w, blk.query_b, ModuleAddress::new(l, ModuleRole::Query))?;
            let k = self.adapted_linear(g, normed, blk.key_w, blk.key_b, ModuleAddress::new(l, ModuleRole::Key))?;
            let v = self.adapted_linear(g, normed, blk.value_w, blk.value_b, ModuleAddress::new(l, ModuleRole::Value))?;
            let mixed = g.multi_head_attention(q, k, v, batch, t, self.cfg.num_heads)?;
            let attn = self.linear(g, mixed, blk.attn_out_w, blk.attn_out_b)?;
            state = g.add(state, attn)?;

            let g2 = g.param(&self.store, blk.ln2_gamma);
            let b2 = g.param(&self.store, blk.ln2_beta);
            let normed2 = g.layer_norm(state, g2, b2, LAYER_NORM_EPS)?;
            let expanded = self.adapted_linear(g, normed2, blk.dense_w, blk.dense_b, ModuleAddress::new(l, ModuleRole::Dense))?;
            let activated = g.gelu(expanded);
            let contracted = self.adapted_linear(g, activated, blk.output_w, blk.output_b, ModuleAddress::new(l, ModuleRole::Output))?;
            state = g.add(state, contracted)?;
        }

        let fg = g.param(&self.store, self.final_gamma);
        let fb = g.param(&self.store, self.final_beta);
        let normed = g.layer_norm(state, fg, fb, LAYER_NORM_EPS)?;
        let pooled = g.mean_pool_tokens(normed, batch, t)?;
        self.linear(g, pooled, self.head_w, self.head_b)
    }

    /// Forward plus mean cross-entropy; returns `(loss, logits)`.
    pub fn loss(&self, g: &mut Graph, x: Tensor, targets: &[usize]) -> Result<(NodeId, NodeId)> {
        let logits = self.logits(g, x)?;
        let loss = g.cross_entropy_mean(logits, targets)?;
        Ok((loss, logits))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg() -> ModelConfig {
        ModelConfig {
            num_layers: 1,
            hidden_dim: 8,
            num_heads: 2,
            mlp_dim: 16,
            num_classes: 3,
            input_dim: 6,
            num_tokens: 2,
            seed: 9,
        }
    }

    #[test]
    fn one_layer_model_exposes_five_targets() {
        let model = build_model(&small_cfg()).unwrap();
        let targets = model.enumerate_targets(&TargetModuleSet::full());
        assert_eq!(targets.len(), 5);
        assert_eq!(targets[0], ModuleAddress::new(0, ModuleRole::Query));
        assert_eq!(targets[4], ModuleAddress::new(0, ModuleRole::Output));
    }

    #[test]
    fn four_layer_model_exposes_twenty_targets() {
        let cfg = ModelConfig::default();
        let model = build_model(&cfg).unwrap();
        assert_eq!(model.enumerate_targets(&TargetModuleSet::full()).len(), 20);
    }

    #[test]
    fn enumerate_single_role_across_layers() {
        let cfg = ModelConfig {
            num_layers: 2,
            ..small_cfg()
        };
        let model = build_model(&cfg).unwrap();
        let set = TargetModuleSet::new(vec![ModuleRole::Query]).unwrap();
        let targets = model.enumerate_targets(&set);
        assert_eq!(
            targets,
            vec![
                ModuleAddress::new(0, ModuleRole::Query),
                ModuleAddress::new(1, ModuleRole::Query)
            ]
        );
    }

    #[test]
    fn twenty_four_layers_five_roles_is_120_targets() {
        // enumeration oracle: count layer-role pairs directly
        let cfg = ModelConfig {
            num_layers: 24,
            ..small_cfg()
        };
        let model = build_model(&cfg).unwrap();
        let targets = model.enumerate_targets(&TargetModuleSet::full());
        let mut expected = 0;
        for _ in 0..24 {
            for _ in ModuleRole::ALL {
                expected += 1;
            }
        }
        assert_eq!(targets.len(), expected);
        assert_eq!(targets.len(), 120);
    }

    #[test]
    fn same_seed_builds_bit_identical_parameters() {
        let cfg = small_cfg();
        let a = build_model(&cfg).unwrap();
        let b = build_model(&cfg).unwrap();
        for id in a.store.ids() {
            assert!(a.store.value(id).bits_eq(b.store.value(id)), "{}", a.store.name(id));
        }
    }

    #[test]
    fn invalid_head_split_is_rejected() {
        let cfg = ModelConfig {
            hidden_dim: 10,
            num_heads: 4,
            ..small_cfg()
        };
        let err = build_model(&cfg).unwrap_err();
        assert!(err.to_string().contains("hidden_dim"));
    }

    #[test]
    fn parameter_count_matches_closed_form() {
        // closed-form oracle, term by term
        let cfg = ModelConfig::default();
        let model = build_model(&cfg).unwrap();
        let (l, h, m, c, i, t) = (
            cfg.num_layers,
            cfg.hidden_dim,
            cfg.mlp_dim,
            cfg.num_classes,
            cfg.input_dim,
            cfg.num_tokens,
        );
        let input_proj = t * h * i + t * h;
        let pos = t * h;
        let per_block = 2 * (2 * h)          // two layer norms
            + 4 * (h * h + h)                // q, k, v, attention out
            + (h * m + m)                    // dense
            + (m * h + h); // output
        let tail = 2 * h + (h * c + c);
        let expected = input_proj + pos + l * per_block + tail;
        assert_eq!(model.parameter_count(false), expected);
        assert_eq!(model.parameter_count(true), expected);
    }

    #[test]
    fn frozen_model_counts_zero_trainable() {
        let mut model = build_model(&small_cfg()).unwrap();
        let ids: Vec<_> = model.store.ids().collect();
        for id in ids {
            model.store.set_requires_grad(id, false);
        }
        assert_eq!(model.parameter_count(true), 0);
    }

    #[test]
    fn forward_produces_finite_logits_of_expected_shape() {
        let cfg = small_cfg();
        let model = build_model(&cfg).unwrap();
        let batch = 5;
        let x = Tensor::new(
            vec![batch, cfg.input_dim],
            (0..batch * cfg.input_dim).map(|i| (i as f64 * 0.37).sin()).collect(),
        )
        .unwrap();
        let mut g = Graph::new();
        let logits = model.logits(&mut g, x).unwrap();
        assert_eq!(g.value(logits).shape(), &[batch, cfg.num_classes]);
        assert!(g.value(logits).all_finite());
    }
}
