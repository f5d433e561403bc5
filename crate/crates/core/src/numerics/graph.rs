//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records ops in construction order, so node indices are already
//! a topological order and the backward pass is a single reverse sweep.
//! Parameters live in a [`ParamStore`] borrowed for the graph's lifetime;
//! parameter nodes refer to the store instead of copying weights.

use std::collections::HashMap;
use std::f64::consts::PI;

use super::tensor::{gemm, gemm_strided, log_sum_exp, softmax_in_place, Mat, Tensor};
use crate::error::{Error, Result};

/// Guard used by [`Graph::cosine`] for near-zero vectors.
pub const COSINE_EPS: f64 = 1e-8;
pub(crate) const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

/// Named, ordered parameter tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
    index: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::contract(format!("duplicate parameter {name}")));
        }
        let id = ParamId(self.values.len());
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.values.push(value);
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn lookup(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    /// Total scalar count across all tensors.
    pub fn scalar_count(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.values
            .iter()
            .enumerate()
            .map(|(i, t)| (ParamId(i), self.names[i].as_str(), t))
    }
}

/// Per-parameter gradient slots, shaped like the store they came from.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    slots: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn empty(store: &ParamStore) -> Self {
        Gradients {
            slots: vec![None; store.len()],
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.slots[id.0].as_ref()
    }

    /// The gradient for `id`, or zeros if it was unreachable from the loss.
    pub fn get_or_zeros(&self, id: ParamId, store: &ParamStore) -> Tensor {
        self.get(id)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(store.get(id).shape()))
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub(crate) fn add_to(&mut self, id: ParamId, g: &Tensor) {
        match &mut self.slots[id.0] {
            Some(t) => t.add_assign(g),
            slot @ None => *slot = Some(g.clone()),
        }
    }

    /// `self += scale · other`.
    pub fn accumulate(&mut self, other: &Gradients, scale: f64) {
        for (mine, theirs) in self.slots.iter_mut().zip(&other.slots) {
            let Some(g) = theirs else { continue };
            match mine {
                Some(t) => {
                    for (a, b) in t.data_mut().iter_mut().zip(g.data()) {
                        *a += scale * b;
                    }
                }
                None => {
                    let mut t = g.clone();
                    t.scale_assign(scale);
                    *mine = Some(t);
                }
            }
        }
    }

    pub fn scale(&mut self, c: f64) {
        for t in self.slots.iter_mut().flatten() {
            t.scale_assign(c);
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.slots.iter().flatten().map(Tensor::sq_norm).sum::<f64>().sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.slots.iter().flatten().all(Tensor::all_finite)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OpKind {
    Input,
    Param,
    MatMul,
    Add,
    AddRow,
    Affine,
    Gelu,
    LayerNorm,
    Attention,
    GatherSum,
    ConcatRows,
    SliceRows,
    Reshape,
    CrossEntropy,
    Mse,
    Cosine,
    Sum,
}

/// Multiplies the gradient flowing back through every op of one kind.
/// Only used to prove that the gradient checker catches broken backward code.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradFault {
    pub op: OpKind,
    pub factor: f64,
}

enum Op {
    Input,
    Param(ParamId),
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    Affine(NodeId, f64),
    Gelu(NodeId),
    LayerNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Attention {
        qkv: NodeId,
        heads: usize,
        probs: Vec<f64>,
    },
    GatherSum {
        table: NodeId,
        ids: Vec<Vec<usize>>,
    },
    ConcatRows(Vec<NodeId>),
    SliceRows {
        a: NodeId,
        start: usize,
    },
    Reshape(NodeId),
    CrossEntropy {
        logits: NodeId,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
    Mse(NodeId, NodeId),
    Cosine {
        a: NodeId,
        b: NodeId,
        norm_a: f64,
        norm_b: f64,
        value: f64,
    },
    Sum(NodeId),
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Input => OpKind::Input,
            Op::Param(_) => OpKind::Param,
            Op::MatMul(..) => OpKind::MatMul,
            Op::Add(..) => OpKind::Add,
            Op::AddRow(..) => OpKind::AddRow,
            Op::Affine(..) => OpKind::Affine,
            Op::Gelu(_) => OpKind::Gelu,
            Op::LayerNorm { .. } => OpKind::LayerNorm,
            Op::Attention { .. } => OpKind::Attention,
            Op::GatherSum { .. } => OpKind::GatherSum,
            Op::ConcatRows(_) => OpKind::ConcatRows,
            Op::SliceRows { .. } => OpKind::SliceRows,
            Op::Reshape(_) => OpKind::Reshape,
            Op::CrossEntropy { .. } => OpKind::CrossEntropy,
            Op::Mse(..) => OpKind::Mse,
            Op::Cosine { .. } => OpKind::Cosine,
            Op::Sum(_) => OpKind::Sum,
        }
    }
}

struct Node {
    // `None` for parameter nodes: the value lives in the store.
    value: Option<Tensor>,
    op: Op,
    requires_grad: bool,
}

pub struct Graph<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
    fault: Option<GradFault>,
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Graph {
            params,
            nodes: Vec::new(),
            fault: None,
        }
    }

    pub fn with_fault(mut self, fault: Option<GradFault>) -> Self {
        self.fault = fault;
        self
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        let node = &self.nodes[id.0];
        match (&node.value, &node.op) {
            (Some(v), _) => v,
            (None, Op::Param(p)) => self.params.get(*p),
            (None, _) => unreachable!("non-parameter node without a value"),
        }
    }

    pub fn scalar(&self, id: NodeId) -> f64 {
        self.value(id).data()[0]
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[NodeId]) -> NodeId {
        let requires_grad = inputs.iter().any(|i| self.nodes[i.0].requires_grad);
        self.nodes.push(Node {
            value: Some(value),
            op,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// A constant input; gradients do not flow into it.
    pub fn input(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Input, &[])
    }

    pub fn param(&mut self, id: ParamId) -> NodeId {
        self.nodes.push(Node {
            value: None,
            op: Op::Param(id),
            requires_grad: true,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn dim_err(&self, op: &'static str, a: NodeId, b: NodeId) -> Error {
        Error::Dimension {
            op,
            left: self.value(a).shape().to_vec(),
            right: self.value(b).shape().to_vec(),
        }
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let out = self.value(a).matmul(self.value(b))?;
        Ok(self.push(out, Op::MatMul(a, b), &[a, b]))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(self.dim_err("add", a, b));
        }
        let mut out = va.clone();
        out.add_assign(vb);
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    /// Adds a length-`cols` vector to every row of `a`.
    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> Result<NodeId> {
        let (va, vr) = (self.value(a), self.value(row));
        if vr.len() != va.cols() {
            return Err(self.dim_err("add_row", a, row));
        }
        let mut out = va.clone();
        for r in 0..out.rows() {
            for (x, b) in out.row_mut(r).iter_mut().zip(vr.data()) {
                *x += b;
            }
        }
        Ok(self.push(out, Op::AddRow(a, row), &[a, row]))
    }

    /// `mul · a + add`, elementwise.
    pub fn affine(&mut self, a: NodeId, mul: f64, add: f64) -> NodeId {
        let mut out = self.value(a).clone();
        for x in out.data_mut() {
            *x = mul * *x + add;
        }
        self.push(out, Op::Affine(a, mul), &[a])
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        self.affine(a, c, 0.0)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let mut out = self.value(a).clone();
        for x in out.data_mut() {
            *x = gelu(*x);
        }
        self.push(out, Op::Gelu(a), &[a])
    }

    /// Row-wise layer normalisation with affine `gamma`/`beta` (length `cols`).
    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId) -> Result<NodeId> {
        let vx = self.value(x);
        let (vg, vb) = (self.value(gamma), self.value(beta));
        let cols = vx.cols();
        if vg.len() != cols || vb.len() != cols {
            return Err(self.dim_err("layer_norm", x, gamma));
        }
        let rows = vx.rows();
        let mut xhat = vec![0.0; vx.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; vx.len()];
        for r in 0..rows {
            let row = vx.row(r);
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / cols as f64;
            let rs = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            rstd[r] = rs;
            for c in 0..cols {
                let h = (row[c] - mean) * rs;
                xhat[r * cols + c] = h;
                out[r * cols + c] = h * vg.data()[c] + vb.data()[c];
            }
        }
        let out = Tensor::from_parts(vx.shape().to_vec(), out);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            &[x, gamma, beta],
        ))
    }

    /// Causal multi-head self-attention over a fused `T × 3d` projection
    /// laid out as `[queries | keys | values]`. Returns `T × d`.
    pub fn causal_attention(&mut self, qkv: NodeId, heads: usize) -> Result<NodeId> {
        let v = self.value(qkv);
        let (t, three_d) = (v.rows(), v.cols());
        if three_d % 3 != 0 || heads == 0 || (three_d / 3) % heads != 0 {
            return Err(Error::contract(format!(
                "attention input width {three_d} incompatible with {heads} heads"
            )));
        }
        let d = three_d / 3;
        let (out, probs) = attention_forward(v.data(), t, d, heads);
        let out = Tensor::from_parts(vec![t, d], out);
        Ok(self.push(out, Op::Attention { qkv, heads, probs }, &[qkv]))
    }

    /// Output row `r` is the sum of `table` rows listed in `ids[r]`.
    pub fn gather_sum(&mut self, table: NodeId, ids: Vec<Vec<usize>>) -> Result<NodeId> {
        let vt = self.value(table);
        let (n, cols) = (vt.rows(), vt.cols());
        if ids.is_empty() {
            return Err(Error::contract("gather_sum with no rows"));
        }
        let mut out = vec![0.0; ids.len() * cols];
        for (r, row_ids) in ids.iter().enumerate() {
            for &i in row_ids {
                if i >= n {
                    return Err(Error::Index {
                        what: "embedding row",
                        index: i,
                        bound: n,
                    });
                }
                for (o, x) in out[r * cols..(r + 1) * cols].iter_mut().zip(vt.row(i)) {
                    *o += x;
                }
            }
        }
        let out = Tensor::from_parts(vec![ids.len(), cols], out);
        Ok(self.push(out, Op::GatherSum { table, ids }, &[table]))
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let Some(&first) = parts.first() else {
            return Err(Error::contract("concat_rows with no parts"));
        };
        let cols = self.value(first).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let v = self.value(p);
            if v.cols() != cols {
                return Err(self.dim_err("concat_rows", first, p));
            }
            rows += v.rows();
            data.extend_from_slice(v.data());
        }
        let out = Tensor::from_parts(vec![rows, cols], data);
        Ok(self.push(out, Op::ConcatRows(parts.to_vec()), parts))
    }

    pub fn slice_rows(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let v = self.value(a);
        if len == 0 || start + len > v.rows() {
            return Err(Error::Index {
                what: "slice_rows",
                index: start + len,
                bound: v.rows(),
            });
        }
        let cols = v.cols();
        let data = v.data()[start * cols..(start + len) * cols].to_vec();
        let out = Tensor::from_parts(vec![len, cols], data);
        Ok(self.push(out, Op::SliceRows { a, start }, &[a]))
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        let out = self.value(a).clone().reshaped(shape)?;
        Ok(self.push(out, Op::Reshape(a), &[a]))
    }

    /// Mean over rows of `-log softmax(logits[r])[targets[r]]`.
    pub fn cross_entropy(&mut self, logits: NodeId, targets: &[usize]) -> Result<NodeId> {
        let v = self.value(logits);
        let (rows, cols) = (v.rows(), v.cols());
        if targets.len() != rows {
            return Err(Error::Dimension {
                op: "cross_entropy",
                left: v.shape().to_vec(),
                right: vec![targets.len()],
            });
        }
        let mut probs = v.data().to_vec();
        let mut total = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            if t >= cols {
                return Err(Error::Index {
                    what: "cross_entropy target",
                    index: t,
                    bound: cols,
                });
            }
            let row = v.row(r);
            total += log_sum_exp(row) - row[t];
            softmax_in_place(&mut probs[r * cols..(r + 1) * cols]);
        }
        let out = Tensor::scalar(total / rows as f64);
        Ok(self.push(
            out,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            &[logits],
        ))
    }

    /// Mean squared difference over all entries.
    pub fn mse(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(self.dim_err("mse", a, b));
        }
        let s: f64 = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(x, y)| (x - y) * (x - y))
            .sum();
        let out = Tensor::scalar(s / va.len() as f64);
        Ok(self.push(out, Op::Mse(a, b), &[a, b]))
    }

    /// `⟨a,b⟩ / (max(‖a‖,ε)·max(‖b‖,ε))` with ε = [`COSINE_EPS`].
    pub fn cosine(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(self.dim_err("cosine", a, b));
        }
        let value = cosine_sim(va.data(), vb.data());
        let norm_a = va.sq_norm().sqrt();
        let norm_b = vb.sq_norm().sqrt();
        Ok(self.push(
            Tensor::scalar(value),
            Op::Cosine {
                a,
                b,
                norm_a,
                norm_b,
                value,
            },
            &[a, b],
        ))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let s = self.value(a).sum();
        self.push(Tensor::scalar(s), Op::Sum(a), &[a])
    }

    /// Reverse sweep from a scalar `loss`; returns gradients for every
    /// parameter reachable from it.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        if !self.value(loss).is_scalar() {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = Vec::with_capacity(loss.0 + 1);
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(Tensor::scalar(1.0));
        let mut out = Gradients::empty(self.params);

        for idx in (0..=loss.0).rev() {
            let Some(mut g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            if let Some(f) = self.fault {
                if f.op == node.op.kind() {
                    g.scale_assign(f.factor);
                }
            }
            self.backprop_node(idx, g, &mut grads, &mut out);
        }
        Ok(out)
    }

    fn wants(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn backprop_node(
        &self,
        idx: usize,
        g: Tensor,
        grads: &mut [Option<Tensor>],
        out: &mut Gradients,
    ) {
        let send = |grads: &mut [Option<Tensor>], id: NodeId, t: Tensor| {
            if !self.nodes[id.0].requires_grad {
                return;
            }
            match &mut grads[id.0] {
                Some(acc) => acc.add_assign(&t),
                slot @ None => *slot = Some(t),
            }
        };
        let node = &self.nodes[idx];
        match &node.op {
            Op::Input => {}
            Op::Param(p) => out.add_to(*p, &g),
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (va.rows(), va.cols(), vb.cols());
                if self.wants(*a) {
                    let mut da = vec![0.0; m * k];
                    gemm(m, n, k, Mat::normal(g.data(), n), Mat::transposed(vb.data(), n), &mut da, false);
                    send(grads, *a, Tensor::from_parts(va.shape().to_vec(), da));
                }
                if self.wants(*b) {
                    let mut db = vec![0.0; k * n];
                    gemm(k, m, n, Mat::transposed(va.data(), k), Mat::normal(g.data(), n), &mut db, false);
                    send(grads, *b, Tensor::from_parts(vb.shape().to_vec(), db));
                }
            }
            Op::Add(a, b) => {
                if self.wants(*b) {
                    send(grads, *b, g.clone());
                }
                send(grads, *a, g);
            }
            Op::AddRow(a, row) => {
                if self.wants(*row) {
                    let vr = self.value(*row);
                    let mut dr = vec![0.0; vr.len()];
                    for r in 0..g.rows() {
                        for (d, x) in dr.iter_mut().zip(g.row(r)) {
                            *d += x;
                        }
                    }
                    send(grads, *row, Tensor::from_parts(vr.shape().to_vec(), dr));
                }
                send(grads, *a, g);
            }
            Op::Affine(a, mul) => {
                let mut g = g;
                g.scale_assign(*mul);
                send(grads, *a, g);
            }
            Op::Gelu(a) => {
                let x = self.value(*a);
                let mut g = g;
                for (d, &xv) in g.data_mut().iter_mut().zip(x.data()) {
                    *d *= gelu_grad(xv);
                }
                send(grads, *a, g);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let vg = self.value(*gamma);
                let cols = vg.len();
                let rows = g.rows();
                if self.wants(*gamma) || self.wants(*beta) {
                    let mut dg = vec![0.0; cols];
                    let mut db = vec![0.0; cols];
                    for r in 0..rows {
                        let gr = g.row(r);
                        for c in 0..cols {
                            dg[c] += gr[c] * xhat[r * cols + c];
                            db[c] += gr[c];
                        }
                    }
                    send(grads, *gamma, Tensor::from_parts(vg.shape().to_vec(), dg));
                    let vb = self.value(*beta);
                    send(grads, *beta, Tensor::from_parts(vb.shape().to_vec(), db));
                }
                if self.wants(*x) {
                    let mut dx = vec![0.0; rows * cols];
                    let inv = 1.0 / cols as f64;
                    for r in 0..rows {
                        let gr = g.row(r);
                        let xh = &xhat[r * cols..(r + 1) * cols];
                        let mut mean_d = 0.0;
                        let mut mean_dx = 0.0;
                        for c in 0..cols {
                            let d = gr[c] * vg.data()[c];
                            mean_d += d;
                            mean_dx += d * xh[c];
                        }
                        mean_d *= inv;
                        mean_dx *= inv;
                        for c in 0..cols {
                            let d = gr[c] * vg.data()[c];
                            dx[r * cols + c] = rstd[r] * (d - mean_d - xh[c] * mean_dx);
                        }
                    }
                    send(grads, *x, Tensor::from_parts(g.shape().to_vec(), dx));
                }
            }
            Op::Attention { qkv, heads, probs } => {
                let v = self.value(*qkv);
                let (t, d) = (v.rows(), v.cols() / 3);
                let dqkv = attention_backward(v.data(), probs, g.data(), t, d, *heads);
                send(grads, *qkv, Tensor::from_parts(v.shape().to_vec(), dqkv));
            }
            Op::GatherSum { table, ids } => {
                let vt = self.value(*table);
                let cols = vt.cols();
                let mut dt = vec![0.0; vt.len()];
                for (r, row_ids) in ids.iter().enumerate() {
                    let gr = g.row(r);
                    for &i in row_ids {
                        for (d, x) in dt[i * cols..(i + 1) * cols].iter_mut().zip(gr) {
                            *d += x;
                        }
                    }
                }
                send(grads, *table, Tensor::from_parts(vt.shape().to_vec(), dt));
            }
            Op::ConcatRows(parts) => {
                let cols = g.cols();
                let mut offset = 0;
                for &p in parts {
                    let vp = self.value(p);
                    let n = vp.len();
                    if self.wants(p) {
                        let data = g.data()[offset..offset + n].to_vec();
                        send(grads, p, Tensor::from_parts(vp.shape().to_vec(), data));
                    }
                    offset += n;
                }
                debug_assert_eq!(offset, g.rows() * cols);
            }
            Op::SliceRows { a, start } => {
                let va = self.value(*a);
                let cols = va.cols();
                let mut da = vec![0.0; va.len()];
                da[start * cols..start * cols + g.len()].copy_from_slice(g.data());
                send(grads, *a, Tensor::from_parts(va.shape().to_vec(), da));
            }
            Op::Reshape(a) => {
                let shape = self.value(*a).shape().to_vec();
                send(grads, *a, Tensor::from_parts(shape, g.into_data()));
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let v = self.value(*logits);
                let cols = v.cols();
                let scale = g.data()[0] / targets.len() as f64;
                let mut d = probs.clone();
                for (r, &t) in targets.iter().enumerate() {
                    d[r * cols + t] -= 1.0;
                }
                for x in &mut d {
                    *x *= scale;
                }
                send(grads, *logits, Tensor::from_parts(v.shape().to_vec(), d));
            }
            Op::Mse(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let c = 2.0 * g.data()[0] / va.len() as f64;
                let diff: Vec<f64> = va
                    .data()
                    .iter()
                    .zip(vb.data())
                    .map(|(x, y)| c * (x - y))
                    .collect();
                if self.wants(*b) {
                    let neg = diff.iter().map(|x| -x).collect();
                    send(grads, *b, Tensor::from_parts(vb.shape().to_vec(), neg));
                }
                send(grads, *a, Tensor::from_parts(va.shape().to_vec(), diff));
            }
            Op::Cosine {
                a,
                b,
                norm_a,
                norm_b,
                value,
            } => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let up = g.data()[0];
                let den = norm_a.max(COSINE_EPS) * norm_b.max(COSINE_EPS);
                let grad_for = |x: &Tensor, y: &Tensor, norm_x: f64| -> Tensor {
                    let data = x
                        .data()
                        .iter()
                        .zip(y.data())
                        .map(|(&xi, &yi)| {
                            let mut d = yi / den;
                            if norm_x > COSINE_EPS {
                                d -= value * xi / (norm_x * norm_x);
                            }
                            up * d
                        })
                        .collect();
                    Tensor::from_parts(x.shape().to_vec(), data)
                };
                if self.wants(*a) {
                    send(grads, *a, grad_for(va, vb, *norm_a));
                }
                if self.wants(*b) {
                    send(grads, *b, grad_for(vb, va, *norm_b));
                }
            }
            Op::Sum(a) => {
                let shape = self.value(*a).shape().to_vec();
                send(grads, *a, Tensor::filled(&shape, g.data()[0]));
            }
        }
    }
}

pub fn cosine_sim(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na.max(COSINE_EPS) * nb.max(COSINE_EPS))
}

const GELU_C: f64 = 0.044_715;

pub(crate) fn gelu(x: f64) -> f64 {
    let k = (2.0 / PI).sqrt();
    0.5 * x * (1.0 + (k * (x + GELU_C * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let k = (2.0 / PI).sqrt();
    let t = (k * (x + GELU_C * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * k * (1.0 + 3.0 * GELU_C * x * x)
}

/// Returns (output `t×d`, per-head probabilities `heads×t×t`).
pub(crate) fn attention_forward(qkv: &[f64], t: usize, d: usize, heads: usize) -> (Vec<f64>, Vec<f64>) {
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let ld = 3 * d;
    let mut out = vec![0.0; t * d];
    let mut probs = vec![0.0; heads * t * t];
    for h in 0..heads {
        let p = &mut probs[h * t * t..(h + 1) * t * t];
        let q = Mat::strided(&qkv[h * dh..], ld, 1);
        let kt = Mat::strided(&qkv[d + h * dh..], 1, ld);
        gemm(t, dh, t, q, kt, p, false);
        for i in 0..t {
            let row = &mut p[i * t..(i + 1) * t];
            for x in row[..=i].iter_mut() {
                *x *= scale;
            }
            softmax_in_place(&mut row[..=i]);
            for x in row[i + 1..].iter_mut() {
                *x = 0.0;
            }
        }
        let vh = Mat::strided(&qkv[2 * d + h * dh..], ld, 1);
        gemm_strided(t, t, dh, Mat::normal(p, t), vh, &mut out[h * dh..], d, false);
    }
    (out, probs)
}

fn attention_backward(qkv: &[f64], probs: &[f64], dout: &[f64], t: usize, d: usize, heads: usize) -> Vec<f64> {
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let ld = 3 * d;
    let mut dqkv = vec![0.0; t * ld];
    let mut dp = vec![0.0; t * t];
    for h in 0..heads {
        let p = &probs[h * t * t..(h + 1) * t * t];
        let d_o = Mat::strided(&dout[h * dh..], d, 1);
        // dP = dO_h · V_hᵀ
        let vt = Mat::strided(&qkv[2 * d + h * dh..], 1, ld);
        gemm(t, dh, t, d_o, vt, &mut dp, false);
        // dV_h = Pᵀ · dO_h
        gemm_strided(t, t, dh, Mat::transposed(p, t), d_o, &mut dqkv[2 * d + h * dh..], ld, false);
        // dS = P ⊙ (dP − rowsum(dP ⊙ P)), folded with the score scale.
        for i in 0..t {
            let pr = &p[i * t..(i + 1) * t];
            let dr = &mut dp[i * t..(i + 1) * t];
            let dot: f64 = pr[..=i].iter().zip(&dr[..=i]).map(|(a, b)| a * b).sum();
            for j in 0..t {
                dr[j] = if j <= i { pr[j] * (dr[j] - dot) * scale } else { 0.0 };
            }
        }
        // dQ_h = dS · K_h ; dK_h = dSᵀ · Q_h
        let k = Mat::strided(&qkv[d + h * dh..], ld, 1);
        gemm_strided(t, t, dh, Mat::normal(&dp, t), k, &mut dqkv[h * dh..], ld, false);
        let q = Mat::strided(&qkv[h * dh..], ld, 1);
        gemm_strided(t, t, dh, Mat::transposed(&dp, t), q, &mut dqkv[d + h * dh..], ld, false);
    }
    dqkv
}
