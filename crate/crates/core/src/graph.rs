//! Reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Graph`] is a define-by-run tape: every builder method computes the
//! forward value eagerly and records the operation so [`Graph::backward`]
//! can replay it in reverse. Values are immutable once recorded. Gradients
//! only flow into leaves registered from a [`ParamStore`] with
//! `requires_grad` set; everything else is pruned during the backward sweep,
//! so frozen weights cost no gradient arithmetic at all.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{matmul, matmul_nt, matmul_tn, Tensor};

/// Handle to a node recorded on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

const GELU_C: f64 = 0.044715;

fn sqrt_2_over_pi() -> f64 {
    (2.0 / std::f64::consts::PI).sqrt()
}

#[derive(Debug)]
enum Op {
    /// Constant input; never receives gradient.
    Input,
    /// Leaf bound to a store parameter.
    Param(ParamId),
    /// A(m x k) * B(k x n).
    MatMul { a: NodeId, b: NodeId },
    /// A(m x k) * B(n x k)^T; the layout linear layers use.
    MatMulNt { a: NodeId, b: NodeId },
    Add { a: NodeId, b: NodeId },
    /// Row-broadcast add of a length-n bias onto an (m x n) matrix.
    AddBias { x: NodeId, bias: NodeId },
    Mul { a: NodeId, b: NodeId },
    Scale { x: NodeId, c: f64 },
    Sum { x: NodeId },
    Gelu { x: NodeId },
    Reshape { x: NodeId },
    LayerNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        // per-row mean and 1/sqrt(var + eps), cached for backward
        means: Vec<f64>,
        inv_stds: Vec<f64>,
    },
    SoftmaxRows { x: NodeId },
    Embedding { table: NodeId, indices: Vec<usize> },
    MultiHeadAttention {
        q: NodeId,
        k: NodeId,
        v: NodeId,
        batch: usize,
        tokens: usize,
        heads: usize,
        // softmax probabilities, one (tokens x tokens) block per (batch, head)
        probs: Vec<f64>,
    },
    MeanPoolTokens { x: NodeId, batch: usize, tokens: usize },
    CrossEntropyMean {
        logits: NodeId,
        targets: Vec<usize>,
        // cached softmax of the logits
        probs: Vec<f64>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Gradients keyed by parameter id. Parameters with `requires_grad == false`
/// never appear.
#[derive(Debug, Clone, Default)]
pub struct GradientMap {
    grads: BTreeMap<ParamId, Tensor>,
}

impl GradientMap {
    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.grads.get(&id)
    }

    pub fn contains(&self, id: ParamId) -> bool {
        self.grads.contains_key(&id)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.grads.iter().map(|(id, t)| (*id, t))
    }

    fn accumulate(&mut self, id: ParamId, shape: &[usize], adj: &[f64]) {
        let entry = self
            .grads
            .entry(id)
            .or_insert_with(|| Tensor::zeros(shape.to_vec()));
        for (g, a) in entry.data_mut().iter_mut().zip(adj.iter()) {
            *g += a;
        }
    }
}

/// Define-by-run tape. One `Graph` per forward/backward pass.
pub struct Graph {
    nodes: Vec<Node>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        id
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    /// Bind a constant tensor (no gradient).
    pub fn input(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Input, false)
    }

    /// Bind a store parameter as a leaf.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> NodeId {
        let needs = store.requires_grad(id);
        self.push(store.value(id).clone(), Op::Param(id), needs)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, ka) = self.value(a).dims2();
        let (kb, n) = self.value(b).dims2();
        if ka != kb {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: self.value(a).shape().to_vec(),
                rhs: self.value(b).shape().to_vec(),
            });
        }
        let data = matmul(self.value(a).data(), self.value(b).data(), m, ka, n);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::new(vec![m, n], data)?, Op::MatMul { a, b }, needs))
    }

    /// `a * b^T`, with `a: (m x k)` and `b: (n x k)`.
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, ka) = self.value(a).dims2();
        let (n, kb) = self.value(b).dims2();
        if ka != kb {
            return Err(Error::ShapeMismatch {
                op: "matmul_nt",
                lhs: self.value(a).shape().to_vec(),
                rhs: self.value(b).shape().to_vec(),
            });
        }
        let data = matmul_nt(self.value(a).data(), self.value(b).data(), m, ka, n);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::new(vec![m, n], data)?, Op::MatMulNt { a, b }, needs))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::ShapeMismatch {
                op: "add",
                lhs: self.value(a).shape().to_vec(),
                rhs: self.value(b).shape().to_vec(),
            });
        }
        let data: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.value(a).shape().to_vec();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::new(shape, data)?, Op::Add { a, b }, needs))
    }

    pub fn add_bias(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let (m, n) = self.value(x).dims2();
        if self.value(bias).numel() != n {
            return Err(Error::ShapeMismatch {
                op: "add_bias",
                lhs: self.value(x).shape().to_vec(),
                rhs: self.value(bias).shape().to_vec(),
            });
        }
        let bdata = self.value(bias).data();
        let mut data = self.value(x).data().to_vec();
        for i in 0..m {
            for (d, bv) in data[i * n..(i + 1) * n].iter_mut().zip(bdata.iter()) {
                *d += bv;
            }
        }
        let shape = self.value(x).shape().to_vec();
        let needs = self.needs(x) || self.needs(bias);
        Ok(self.push(Tensor::new(shape, data)?, Op::AddBias { x, bias }, needs))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::ShapeMismatch {
                op: "mul",
                lhs: self.value(a).shape().to_vec(),
                rhs: self.value(b).shape().to_vec(),
            });
        }
        let data: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.value(a).shape().to_vec();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::new(shape, data)?, Op::Mul { a, b }, needs))
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> NodeId {
        let data: Vec<f64> = self.value(x).data().iter().map(|v| v * c).collect();
        let shape = self.value(x).shape().to_vec();
        let needs = self.needs(x);
        self.push(
            Tensor::new(shape, data).expect("scale preserves shape"),
            Op::Scale { x, c },
            needs,
        )
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let total: f64 = self.value(x).data().iter().sum();
        let needs = self.needs(x);
        self.push(Tensor::scalar(total), Op::Sum { x }, needs)
    }

    /// GELU, tanh form: `0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))`.
    pub fn gelu(&mut self, x: NodeId) -> NodeId {
        let c = sqrt_2_over_pi();
        let data: Vec<f64> = self
            .value(x)
            .data()
            .iter()
            .map(|&v| 0.5 * v * (1.0 + (c * (v + GELU_C * v * v * v)).tanh()))
            .collect();
        let shape = self.value(x).shape().to_vec();
        let needs = self.needs(x);
        self.push(
            Tensor::new(shape, data).expect("gelu preserves shape"),
            Op::Gelu { x },
            needs,
        )
    }

    pub fn reshape(&mut self, x: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        let numel: usize = shape.iter().product();
        if numel != self.value(x).numel() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: self.value(x).shape().to_vec(),
                rhs: shape,
            });
        }
        let data = self.value(x).data().to_vec();
        let needs = self.needs(x);
        Ok(self.push(Tensor::new(shape, data)?, Op::Reshape { x }, needs))
    }

    /// Row-wise layer norm with affine parameters over the last dimension.
    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, eps: f64) -> Result<NodeId> {
        let (m, n) = self.value(x).dims2();
        if self.value(gamma).numel() != n || self.value(beta).numel() != n {
            return Err(Error::ShapeMismatch {
                op: "layer_norm",
                lhs: self.value(x).shape().to_vec(),
                rhs: self.value(gamma).shape().to_vec(),
            });
        }
        let xd = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut data = vec![0.0; m * n];
        let mut means = vec![0.0; m];
        let mut inv_stds = vec![0.0; m];
        for i in 0..m {
            let row = &xd[i * n..(i + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let inv_std = 1.0 / (var + eps).sqrt();
            means[i] = mean;
            inv_stds[i] = inv_std;
            for j in 0..n {
                data[i * n + j] = (row[j] - mean) * inv_std * g[j] + b[j];
            }
        }
        let shape = self.value(x).shape().to_vec();
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        Ok(self.push(
            Tensor::new(shape, data)?,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                means,
                inv_stds,
            },
            needs,
        ))
    }

    /// Numerically stable row-wise softmax.
    pub fn softmax_rows(&mut self, x: NodeId) -> NodeId {
        let (m, n) = self.value(x).dims2();
        let xd = self.value(x).data();
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            let row = &xd[i * n..(i + 1) * n];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut denom = 0.0;
            for j in 0..n {
                let e = (row[j] - max).exp();
                data[i * n + j] = e;
                denom += e;
            }
            for v in &mut data[i * n..(i + 1) * n] {
                *v /= denom;
            }
        }
        let shape = self.value(x).shape().to_vec();
        let needs = self.needs(x);
        self.push(
            Tensor::new(shape, data).expect("softmax preserves shape"),
            Op::SoftmaxRows { x },
            needs,
        )
    }

    /// Row gather: output row i is `table[indices[i]]`.
    pub fn embedding(&mut self, table: NodeId, indices: &[usize]) -> Result<NodeId> {
        let (rows, dim) = self.value(table).dims2();
        if let Some(&bad) = indices.iter().find(|&&i| i >= rows) {
            return Err(Error::ShapeMismatch {
                op: "embedding",
                lhs: vec![rows, dim],
                rhs: vec![bad],
            });
        }
        let td = self.value(table).data();
        let mut data = Vec::with_capacity(indices.len() * dim);
        for &i in indices {
            data.extend_from_slice(&td[i * dim..(i + 1) * dim]);
        }
        let needs = self.needs(table);
        Ok(self.push(
            Tensor::new(vec![indices.len(), dim], data)?,
            Op::Embedding {
                table,
                indices: indices.to_vec(),
            },
            needs,
        ))
    }

    /// Scaled dot-product attention over `heads` heads. Inputs are
    /// `(batch * tokens) x dim` matrices; attention mixes tokens within each
    /// batch element independently.
    pub fn multi_head_attention(
        &mut self,
        q: NodeId,
        k: NodeId,
        v: NodeId,
        batch: usize,
        tokens: usize,
        heads: usize,
    ) -> Result<NodeId> {
        let (rows, dim) = self.value(q).dims2();
        for (name, node) in [("k", k), ("v", v)] {
            if self.value(node).dims2() != (rows, dim) {
                let _ = name;
                return Err(Error::ShapeMismatch {
                    op: "multi_head_attention",
                    lhs: vec![rows, dim],
                    rhs: self.value(node).shape().to_vec(),
                });
            }
        }
        if rows != batch * tokens || heads == 0 || dim % heads != 0 {
            return Err(Error::ShapeMismatch {
                op: "multi_head_attention",
                lhs: vec![batch, tokens, heads],
                rhs: vec![rows, dim],
            });
        }
        let dh = dim / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let qd = self.value(q).data();
        let kd = self.value(k).data();
        let vd = self.value(v).data();

        let mut out = vec![0.0; rows * dim];
        let mut probs = vec![0.0; batch * heads * tokens * tokens];
        let mut scores = vec![0.0; tokens];

        for b in 0..batch {
            for h in 0..heads {
                let col = h * dh;
                let pbase = (b * heads + h) * tokens * tokens;
                for ti in 0..tokens {
                    let qrow = &qd[(b * tokens + ti) * dim + col..(b * tokens + ti) * dim + col + dh];
                    let mut max = f64::NEG_INFINITY;
                    for (tj, s) in scores.iter_mut().enumerate() {
                        let krow =
                            &kd[(b * tokens + tj) * dim + col..(b * tokens + tj) * dim + col + dh];
                        let dot: f64 = qrow.iter().zip(krow).map(|(a, c)| a * c).sum();
                        *s = dot * scale;
                        max = max.max(*s);
                    }
                    let mut denom = 0.0;
                    for s in scores.iter_mut() {
                        *s = (*s - max).exp();
                        denom += *s;
                    }
                    let orow = &mut out[(b * tokens + ti) * dim + col..(b * tokens + ti) * dim + col + dh];
                    for tj in 0..tokens {
                        let p = scores[tj] / denom;
                        probs[pbase + ti * tokens + tj] = p;
                        let vrow =
                            &vd[(b * tokens + tj) * dim + col..(b * tokens + tj) * dim + col + dh];
                        for (o, vv) in orow.iter_mut().zip(vrow) {
                            *o += p * vv;
                        }
                    }
                }
            }
        }

        let needs = self.needs(q) || self.needs(k) || self.needs(v);
        Ok(self.push(
            Tensor::new(vec![rows, dim], out)?,
            Op::MultiHeadAttention {
                q,
                k,
                v,
                batch,
                tokens,
                heads,
                probs,
            },
            needs,
        ))
    }

    /// Mean over the token axis: `(batch * tokens) x dim -> batch x dim`.
    pub fn mean_pool_tokens(&mut self, x: NodeId, batch: usize, tokens: usize) -> Result<NodeId> {
        let (rows, dim) = self.value(x).dims2();
        if rows != batch * tokens || tokens == 0 {
            return Err(Error::ShapeMismatch {
                op: "mean_pool_tokens",
                lhs: vec![rows, dim],
                rhs: vec![batch, tokens],
            });
        }
        let xd = self.value(x).data();
        let mut data = vec![0.0; batch * dim];
        for b in 0..batch {
            let orow = &mut data[b * dim..(b + 1) * dim];
            for t in 0..tokens {
                let xrow = &xd[(b * tokens + t) * dim..(b * tokens + t + 1) * dim];
                for (o, xv) in orow.iter_mut().zip(xrow) {
                    *o += xv;
                }
            }
            for o in orow.iter_mut() {
                *o /= tokens as f64;
            }
        }
        let needs = self.needs(x);
        Ok(self.push(
            Tensor::new(vec![batch, dim], data)?,
            Op::MeanPoolTokens { x, batch, tokens },
            needs,
        ))
    }

    /// Mean cross-entropy between row logits and integer class targets.
    pub fn cross_entropy_mean(&mut self, logits: NodeId, targets: &[usize]) -> Result<NodeId> {
        let (m, n) = self.value(logits).dims2();
        if targets.len() != m {
            return Err(Error::ShapeMismatch {
                op: "cross_entropy_mean",
                lhs: vec![m, n],
                rhs: vec![targets.len()],
            });
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= n) {
            return Err(Error::ShapeMismatch {
                op: "cross_entropy_mean",
                lhs: vec![m, n],
                rhs: vec![bad],
            });
        }
        let ld = self.value(logits).data();
        let mut probs = vec![0.0; m * n];
        let mut total = 0.0;
        for i in 0..m {
            let row = &ld[i * n..(i + 1) * n];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut denom = 0.0;
            for j in 0..n {
                let e = (row[j] - max).exp();
                probs[i * n + j] = e;
                denom += e;
            }
            for p in &mut probs[i * n..(i + 1) * n] {
                *p /= denom;
            }
            total += denom.ln() + max - row[targets[i]];
        }
        let loss = total / m as f64;
        let needs = self.needs(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropyMean {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            needs,
        ))
    }

    /// Reverse sweep from a scalar `loss` node. Returns gradients for every
    /// reachable parameter whose `requires_grad` was set when it was bound.
    pub fn backward(&mut self, loss: NodeId) -> Result<GradientMap> {
        if !self.value(loss).is_scalar() {
            return Err(Error::NonScalar {
                op: "backward",
                shape: self.value(loss).shape().to_vec(),
            });
        }
        let mut adjoints: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        adjoints[loss.0] = Some(vec![1.0]);
        let mut map = GradientMap::default();

        for idx in (0..=loss.0).rev() {
            let adj = match adjoints[idx].take() {
                Some(a) => a,
                None => continue,
            };
            if !self.nodes[idx].needs_grad {
                continue;
            }
            // split borrows: read-only node data, push into adjoints
            macro_rules! accum {
                ($target:expr, $data:expr) => {{
                    let t: NodeId = $target;
                    if self.nodes[t.0].needs_grad {
                        let d: Vec<f64> = $data;
                        match &mut adjoints[t.0] {
                            Some(existing) => {
                                for (e, v) in existing.iter_mut().zip(d.iter()) {
                                    *e += v;
                                }
                            }
                            slot => *slot = Some(d),
                        }
                    }
                }};
            }

            match &self.nodes[idx].op {
                Op::Input => {}
                Op::Param(pid) => {
                    let shape = self.nodes[idx].value.shape().to_vec();
                    map.accumulate(*pid, &shape, &adj);
                }
                Op::MatMul { a, b } => {
                    let (a, b) = (*a, *b);
                    let (m, k) = self.value(a).dims2();
                    let (_, n) = self.value(b).dims2();
                    if self.nodes[a.0].needs_grad {
                        let da = matmul_nt(&adj, self.value(b).data(), m, n, k);
                        accum!(a, da);
                    }
                    if self.nodes[b.0].needs_grad {
                        let db = matmul_tn(self.value(a).data(), &adj, m, k, n);
                        accum!(b, db);
                    }
                }
                Op::MatMulNt { a, b } => {
                    let (a, b) = (*a, *b);
                    let (m, k) = self.value(a).dims2();
                    let (n, _) = self.value(b).dims2();
                    if self.nodes[a.0].needs_grad {
                        let da = matmul(&adj, self.value(b).data(), m, n, k);
                        accum!(a, da);
                    }
                    if self.nodes[b.0].needs_grad {
                        let db = matmul_tn(&adj, self.value(a).data(), m, n, k);
                        accum!(b, db);
                    }
                }
                Op::Add { a, b } => {
                    let (a, b) = (*a, *b);
                    accum!(a, adj.clone());
                    accum!(b, adj.clone());
                }
                Op::AddBias { x, bias } => {
                    let (x, bias) = (*x, *bias);
                    let (m, n) = self.value(x).dims2();
                    accum!(x, adj.clone());
                    if self.nodes[bias.0].needs_grad {
                        let mut db = vec![0.0; n];
                        for i in 0..m {
                            for (d, a) in db.iter_mut().zip(&adj[i * n..(i + 1) * n]) {
                                *d += a;
                            }
                        }
                        accum!(bias, db);
                    }
                }
                Op::Mul { a, b } => {
                    let (a, b) = (*a, *b);
                    if self.nodes[a.0].needs_grad {
                        let da: Vec<f64> = adj
                            .iter()
                            .zip(self.value(b).data())
                            .map(|(g, v)| g * v)
                            .collect();
                        accum!(a, da);
                    }
                    if self.nodes[b.0].needs_grad {
                        let db: Vec<f64> = adj
                            .iter()
                            .zip(self.value(a).data())
                            .map(|(g, v)| g * v)
                            .collect();
                        accum!(b, db);
                    }
                }
                Op::Scale { x, c } => {
                    let (x, c) = (*x, *c);
                    let dx: Vec<f64> = adj.iter().map(|g| g * c).collect();
                    accum!(x, dx);
                }
                Op::Sum { x } => {
                    let x = *x;
                    let n = self.value(x).numel();
                    accum!(x, vec![adj[0]; n]);
                }
                Op::Gelu { x } => {
                    let x = *x;
                    let c = sqrt_2_over_pi();
                    let dx: Vec<f64> = self
                        .value(x)
                        .data()
                        .iter()
                        .zip(adj.iter())
                        .map(|(&v, &g)| {
                            let u = c * (v + GELU_C * v * v * v);
                            let t = u.tanh();
                            let du = c * (1.0 + 3.0 * GELU_C * v * v);
                            g * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du)
                        })
                        .collect();
                    accum!(x, dx);
                }
                Op::Reshape { x } => {
                    let x = *x;
                    accum!(x, adj.clone());
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    means,
                    inv_stds,
                    ..
                } => {
                    let (x, gamma, beta) = (*x, *gamma, *beta);
                    let (m, n) = self.value(x).dims2();
                    let xd = self.value(x).data();
                    let g = self.value(gamma).data();
                    let means = means.clone();
                    let inv_stds = inv_stds.clone();

                    if self.nodes[gamma.0].needs_grad {
                        let mut dg = vec![0.0; n];
                        for i in 0..m {
                            for j in 0..n {
                                let xhat = (xd[i * n + j] - means[i]) * inv_stds[i];
                                dg[j] += adj[i * n + j] * xhat;
                            }
                        }
                        accum!(gamma, dg);
                    }
                    if self.nodes[beta.0].needs_grad {
                        let mut db = vec![0.0; n];
                        for i in 0..m {
                            for (d, a) in db.iter_mut().zip(&adj[i * n..(i + 1) * n]) {
                                *d += a;
                            }
                        }
                        accum!(beta, db);
                    }
                    if self.nodes[x.0].needs_grad {
                        let mut dx = vec![0.0; m * n];
                        for i in 0..m {
                            // dxhat_j = adj_j * gamma_j; standard layer norm backward
                            let mut sum_dxhat = 0.0;
                            let mut sum_dxhat_xhat = 0.0;
                            for j in 0..n {
                                let xhat = (xd[i * n + j] - means[i]) * inv_stds[i];
                                let dxhat = adj[i * n + j] * g[j];
                                sum_dxhat += dxhat;
                                sum_dxhat_xhat += dxhat * xhat;
                            }
                            let nf = n as f64;
                            for j in 0..n {
                                let xhat = (xd[i * n + j] - means[i]) * inv_stds[i];
                                let dxhat = adj[i * n + j] * g[j];
                                dx[i * n + j] = inv_stds[i] / nf
                                    * (nf * dxhat - sum_dxhat - xhat * sum_dxhat_xhat);
                            }
                        }
                        accum!(x, dx);
                    }
                }
                Op::SoftmaxRows { x } => {
                    let x = *x;
                    let (m, n) = self.nodes[idx].value.dims2();
                    let y = self.nodes[idx].value.data();
                    let mut dx = vec![0.0; m * n];
                    for i in 0..m {
                        let yrow = &y[i * n..(i + 1) * n];
                        let arow = &adj[i * n..(i + 1) * n];
                        let dot: f64 = yrow.iter().zip(arow).map(|(a, b)| a * b).sum();
                        for j in 0..n {
                            dx[i * n + j] = yrow[j] * (arow[j] - dot);
                        }
                    }
                    accum!(x, dx);
                }
                Op::Embedding { table, indices } => {
                    let table = *table;
                    let indices = indices.clone();
                    let (rows, dim) = self.value(table).dims2();
                    let mut dt = vec![0.0; rows * dim];
                    for (r, &i) in indices.iter().enumerate() {
                        for (d, a) in dt[i * dim..(i + 1) * dim]
                            .iter_mut()
                            .zip(&adj[r * dim..(r + 1) * dim])
                        {
                            *d += a;
                        }
                    }
                    accum!(table, dt);
                }
                Op::MultiHeadAttention {
                    q,
                    k,
                    v,
                    batch,
                    tokens,
                    heads,
                    probs,
                } => {
                    let (q, k, v) = (*q, *k, *v);
                    let (batch, tokens, heads) = (*batch, *tokens, *heads);
                    let probs = probs.clone();
                    let (_, dim) = self.value(q).dims2();
                    let dh = dim / heads;
                    let scale = 1.0 / (dh as f64).sqrt();
                    let qd = self.value(q).data();
                    let kd = self.value(k).data();
                    let vd = self.value(v).data();

                    let mut dq = vec![0.0; qd.len()];
                    let mut dk = vec![0.0; kd.len()];
                    let mut dv = vec![0.0; vd.len()];
                    let mut dp = vec![0.0; tokens];
                    let mut ds = vec![0.0; tokens];

                    for b in 0..batch {
                        for h in 0..heads {
                            let col = h * dh;
                            let pbase = (b * heads + h) * tokens * tokens;
                            for ti in 0..tokens {
                                let arow = &adj[(b * tokens + ti) * dim + col
                                    ..(b * tokens + ti) * dim + col + dh];
                                let prow = &probs[pbase + ti * tokens..pbase + (ti + 1) * tokens];
                                // dV and dP
                                let mut dot = 0.0;
                                for tj in 0..tokens {
                                    let vrow = &vd[(b * tokens + tj) * dim + col
                                        ..(b * tokens + tj) * dim + col + dh];
                                    let d: f64 = arow.iter().zip(vrow).map(|(a, c)| a * c).sum();
                                    dp[tj] = d;
                                    dot += prow[tj] * d;
                                    let dvrow = &mut dv[(b * tokens + tj) * dim + col
                                        ..(b * tokens + tj) * dim + col + dh];
                                    for (o, a) in dvrow.iter_mut().zip(arow) {
                                        *o += prow[tj] * a;
                                    }
                                }
                                // softmax backward, then into q and k
                                for tj in 0..tokens {
                                    ds[tj] = prow[tj] * (dp[tj] - dot) * scale;
                                }
                                let qrow = &qd[(b * tokens + ti) * dim + col
                                    ..(b * tokens + ti) * dim + col + dh];
                                for tj in 0..tokens {
                                    let krow = &kd[(b * tokens + tj) * dim + col
                                        ..(b * tokens + tj) * dim + col + dh];
                                    let dqrow = &mut dq[(b * tokens + ti) * dim + col
                                        ..(b * tokens + ti) * dim + col + dh];
                                    for (o, c) in dqrow.iter_mut().zip(krow) {
                                        *o += ds[tj] * c;
                                    }
                                    let dkrow = &mut dk[(b * tokens + tj) * dim + col
                                        ..(b * tokens + tj) * dim + col + dh];
                                    for (o, c) in dkrow.iter_mut().zip(qrow) {
                                        *o += ds[tj] * c;
                                    }
                                }
                            }
                        }
                    }
                    accum!(q, dq);
                    accum!(k, dk);
                    accum!(v, dv);
                }
                Op::MeanPoolTokens { x, batch, tokens } => {
                    let (x, batch, tokens) = (*x, *batch, *tokens);
                    let (_, dim) = self.value(x).dims2();
                    let inv = 1.0 / tokens as f64;
                    let mut dx = vec![0.0; batch * tokens * dim];
                    for b in 0..batch {
                        let arow = &adj[b * dim..(b + 1) * dim];
                        for t in 0..tokens {
                            for (o, a) in dx
                                [(b * tokens + t) * dim..(b * tokens + t + 1) * dim]
                                .iter_mut()
                                .zip(arow)
                            {
                                *o = a * inv;
                            }
                        }
                    }
                    accum!(x, dx);
                }
                Op::CrossEntropyMean {
                    logits,
                    targets,
                    probs,
                } => {
                    let logits = *logits;
                    let targets = targets.clone();
                    let (m, n) = self.value(logits).dims2();
                    let g = adj[0] / m as f64;
                    let mut dl = probs.clone();
                    for (i, &t) in targets.iter().enumerate() {
                        dl[i * n + t] -= 1.0;
                    }
                    for v in &mut dl {
                        *v *= g;
                    }
                    accum!(logits, dl);
                }
            }
        }
        Ok(map)
    }
}
