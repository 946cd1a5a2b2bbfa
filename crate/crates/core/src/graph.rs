//! Tape-based reverse-mode differentiation over dense tensors.
//!
//! A [`Graph`] records every operation as a node in creation order, which is
//! already a topological order, so [`Graph::backward`] is one reverse sweep.
//! Ops cover exactly what the transformer and the retrieval objectives need;
//! causal attention over packed sequences is a single fused node.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::tensor::{dot, matmul_acc, matmul_at_acc, matmul_bt_acc, Scalar, Tensor};

/// Layer-norm variance epsilon.
pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul { a: NodeId, b: NodeId },
    MatMulBT { a: NodeId, b: NodeId },
    Add { a: NodeId, b: NodeId },
    Sub { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    AddRow { x: NodeId, bias: NodeId },
    Scale { x: NodeId, c: T },
    Gelu { x: NodeId },
    Softmax { x: NodeId },
    LayerNorm { x: NodeId, gamma: NodeId, beta: NodeId, xhat: Vec<T>, rstd: Vec<T> },
    Gather { table: NodeId, ids: Vec<u32> },
    Attention { qkv: NodeId, segments: Vec<(usize, usize)>, n_heads: usize, probs: Vec<T> },
    SegmentMean { x: NodeId, ranges: Vec<(usize, usize)> },
    NormalizeRows { x: NodeId, norms: Vec<T> },
    CrossEntropy { logits: NodeId, rows: Vec<usize>, targets: Vec<usize>, candidates: Option<Vec<Vec<usize>>>, probs: Vec<T> },
    Sum { x: NodeId },
    Mean { x: NodeId },
    Dropout { x: NodeId, mask: Vec<T> },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Rows of one cross-entropy term: which logits rows participate, the target
/// column of each, and optionally the subset of columns each row normalizes
/// over (the target must belong to it).
#[derive(Debug, Clone, Default)]
pub struct CrossEntropySpec {
    pub rows: Vec<usize>,
    pub targets: Vec<usize>,
    pub candidates: Option<Vec<Vec<usize>>>,
}

#[derive(Debug, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

/// Gradients produced by [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient for `id`; nodes the loss does not reach get zeros.
    pub fn get(&self, id: NodeId) -> Tensor<T> {
        let shape = self.shapes[id.0].clone();
        match &self.grads[id.0] {
            Some(g) => Tensor::new(shape, g.clone()).expect("gradient shape"),
            None => Tensor::zeros(shape),
        }
    }

    pub fn take(&mut self, id: NodeId) -> Tensor<T> {
        let shape = self.shapes[id.0].clone();
        match self.grads[id.0].take() {
            Some(g) => Tensor::new(shape, g).expect("gradient shape"),
            None => Tensor::zeros(shape),
        }
    }
}

fn shape_err(op: &'static str, detail: alloc::string::String) -> Error {
    Error::Shape { op, detail }
}

fn require_rank2<T: Scalar>(op: &'static str, t: &Tensor<T>) -> Result<(usize, usize)> {
    if t.rank() != 2 {
        return Err(shape_err(op, format!("expected a matrix, got shape {:?}", t.shape())));
    }
    Ok((t.shape()[0], t.shape()[1]))
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> NodeId {
        self.nodes.push(Node { value, op, requires_grad });
        NodeId(self.nodes.len() - 1)
    }

    fn rg(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].requires_grad)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> NodeId {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    /// Copies the value of `x` into a constant, blocking gradient flow.
    pub fn detach(&mut self, x: NodeId) -> NodeId {
        let v = self.nodes[x.0].value.clone();
        self.constant(v)
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, k) = require_rank2("matmul", self.value(a))?;
        let (k2, n) = require_rank2("matmul", self.value(b))?;
        if k != k2 {
            return Err(shape_err("matmul", format!("inner dims {k} and {k2} differ")));
        }
        let mut out = vec![T::zero(); m * n];
        matmul_acc(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul { a, b }, rg))
    }

    /// `a · bᵀ`
    pub fn matmul_bt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, k) = require_rank2("matmul_bt", self.value(a))?;
        let (n, k2) = require_rank2("matmul_bt", self.value(b))?;
        if k != k2 {
            return Err(shape_err("matmul_bt", format!("inner dims {k} and {k2} differ")));
        }
        let mut out = vec![T::zero(); m * n];
        matmul_bt_acc(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMulBT { a, b }, rg))
    }

    fn same_shape(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(shape_err(
                op,
                format!("{:?} vs {:?}", self.value(a).shape(), self.value(b).shape()),
            ));
        }
        Ok(())
    }

    fn zip_with(&mut self, op: &'static str, a: NodeId, b: NodeId, f: impl Fn(T, T) -> T, mk: Op<T>) -> Result<NodeId> {
        self.same_shape(op, a, b)?;
        let va = self.value(a);
        let vb = self.value(b);
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let t = Tensor::new(va.shape().to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, mk, rg))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.zip_with("add", a, b, |x, y| x + y, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.zip_with("sub", a, b, |x, y| x - y, Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.zip_with("mul", a, b, |x, y| x * y, Op::Mul { a, b })
    }

    /// Adds a bias vector to every row of `x`.
    pub fn add_row(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let (_, n) = require_rank2("add_row", self.value(x))?;
        if self.value(bias).shape() != [n] {
            return Err(shape_err("add_row", format!("bias {:?} for {n} columns", self.value(bias).shape())));
        }
        let b = self.value(bias).data();
        let data = self
            .value(x)
            .data()
            .chunks(n)
            .flat_map(|row| row.iter().zip(b).map(|(&v, &bv)| v + bv))
            .collect();
        let t = Tensor::new(self.value(x).shape().to_vec(), data)?;
        let rg = self.rg(&[x, bias]);
        Ok(self.push(t, Op::AddRow { x, bias }, rg))
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> Result<NodeId> {
        let c = T::from_f64(c);
        let v = self.value(x);
        let t = Tensor::new(v.shape().to_vec(), v.data().iter().map(|&e| e * c).collect())?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::Scale { x, c }, rg))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: NodeId) -> Result<NodeId> {
        let v = self.value(x);
        let t = Tensor::new(v.shape().to_vec(), v.data().iter().map(|&e| gelu(e)).collect())?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::Gelu { x }, rg))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: NodeId) -> Result<NodeId> {
        let v = self.value(x);
        if v.rank() == 0 {
            return Err(shape_err("softmax", "needs at least one axis".into()));
        }
        let n = v.cols();
        let mut data = v.data().to_vec();
        for row in data.chunks_mut(n) {
            softmax_in_place(row);
        }
        let t = Tensor::new(v.shape().to_vec(), data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::Softmax { x }, rg))
    }

    /// Row-wise layer norm with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId) -> Result<NodeId> {
        let (rows, n) = require_rank2("layer_norm", self.value(x))?;
        if self.value(gamma).shape() != [n] || self.value(beta).shape() != [n] {
            return Err(shape_err("layer_norm", format!("affine params must have {n} entries")));
        }
        let eps = T::from_f64(LAYER_NORM_EPS);
        let nf = T::from_f64(n as f64);
        let xv = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = vec![T::zero(); rows * n];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); rows * n];
        for r in 0..rows {
            let row = &xv[r * n..(r + 1) * n];
            let mean = row.iter().copied().sum::<T>() / nf;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nf;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for c in 0..n {
                let h = (row[c] - mean) * rs;
                xhat[r * n + c] = h;
                out[r * n + c] = h * g[c] + b[c];
            }
        }
        let rg = self.rg(&[x, gamma, beta]);
        Ok(self.push(Tensor::new(vec![rows, n], out)?, Op::LayerNorm { x, gamma, beta, xhat, rstd }, rg))
    }

    /// Selects rows of `table` by index (embedding lookup).
    pub fn gather(&mut self, table: NodeId, ids: &[u32]) -> Result<NodeId> {
        let (rows, n) = require_rank2("gather", self.value(table))?;
        let tv = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * n);
        for &id in ids {
            let id = id as usize;
            if id >= rows {
                return Err(shape_err("gather", format!("row {id} out of range for {rows} rows")));
            }
            out.extend_from_slice(&tv[id * n..(id + 1) * n]);
        }
        let rg = self.rg(&[table]);
        Ok(self.push(Tensor::new(vec![ids.len(), n], out)?, Op::Gather { table, ids: ids.to_vec() }, rg))
    }

    /// Multi-head causal self-attention over packed sequences.
    ///
    /// `qkv` is `[T × 3d]` holding queries, keys and values side by side;
    /// `segments` are disjoint `(start, len)` row ranges, each attending only
    /// within itself and only to earlier-or-equal positions.
    pub fn causal_attention(&mut self, qkv: NodeId, segments: &[(usize, usize)], n_heads: usize) -> Result<NodeId> {
        let (rows, w) = require_rank2("causal_attention", self.value(qkv))?;
        if n_heads == 0 || w % (3 * n_heads) != 0 {
            return Err(shape_err("causal_attention", format!("width {w} not divisible into 3x{n_heads} heads")));
        }
        let d = w / 3;
        let dh = d / n_heads;
        let scale = T::one() / T::from_f64(dh as f64).sqrt();
        let qv = self.value(qkv).data();
        let mut out = vec![T::zero(); rows * d];
        let mut probs = Vec::new();
        for &(start, len) in segments {
            if start + len > rows {
                return Err(shape_err("causal_attention", format!("segment ({start},{len}) exceeds {rows} rows")));
            }
            for h in 0..n_heads {
                let qo = h * dh;
                let ko = d + h * dh;
                let vo = 2 * d + h * dh;
                let base = probs.len();
                probs.resize(base + len * len, T::zero());
                for i in 0..len {
                    let qi = &qv[(start + i) * w + qo..(start + i) * w + qo + dh];
                    let p = &mut probs[base + i * len..base + i * len + i + 1];
                    for (j, pj) in p.iter_mut().enumerate() {
                        let kj = &qv[(start + j) * w + ko..(start + j) * w + ko + dh];
                        *pj = dot(qi, kj) * scale;
                    }
                    softmax_in_place(p);
                    let o = &mut out[(start + i) * d + qo..(start + i) * d + qo + dh];
                    for (j, &pj) in p.iter().enumerate() {
                        let vj = &qv[(start + j) * w + vo..(start + j) * w + vo + dh];
                        for (oe, &ve) in o.iter_mut().zip(vj) {
                            *oe = *oe + pj * ve;
                        }
                    }
                }
            }
        }
        let rg = self.rg(&[qkv]);
        Ok(self.push(
            Tensor::new(vec![rows, d], out)?,
            Op::Attention { qkv, segments: segments.to_vec(), n_heads, probs },
            rg,
        ))
    }

    /// Mean of rows `start..end` for each range; output `[ranges × cols]`.
    pub fn segment_mean(&mut self, x: NodeId, ranges: &[(usize, usize)]) -> Result<NodeId> {
        let (rows, n) = require_rank2("segment_mean", self.value(x))?;
        let xv = self.value(x).data();
        let mut out = vec![T::zero(); ranges.len() * n];
        for (r, &(s, e)) in ranges.iter().enumerate() {
            if s >= e || e > rows {
                return Err(shape_err("segment_mean", format!("range {s}..{e} invalid for {rows} rows")));
            }
            let inv = T::one() / T::from_f64((e - s) as f64);
            let o = &mut out[r * n..(r + 1) * n];
            for row in s..e {
                for (oe, &v) in o.iter_mut().zip(&xv[row * n..(row + 1) * n]) {
                    *oe = *oe + v;
                }
            }
            for oe in o.iter_mut() {
                *oe = *oe * inv;
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(vec![ranges.len(), n], out)?, Op::SegmentMean { x, ranges: ranges.to_vec() }, rg))
    }

    /// Scales each row to unit L2 norm. Zero rows are rejected.
    pub fn normalize_rows(&mut self, x: NodeId) -> Result<NodeId> {
        let (rows, n) = require_rank2("normalize_rows", self.value(x))?;
        let xv = self.value(x).data();
        let mut norms = Vec::with_capacity(rows);
        let mut out = vec![T::zero(); rows * n];
        for r in 0..rows {
            let row = &xv[r * n..(r + 1) * n];
            let norm = dot(row, row).sqrt();
            if norm == T::zero() {
                return Err(Error::InvalidInput(format!("row {r} has zero norm")));
            }
            norms.push(norm);
            for (o, &v) in out[r * n..(r + 1) * n].iter_mut().zip(row) {
                *o = v / norm;
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(vec![rows, n], out)?, Op::NormalizeRows { x, norms }, rg))
    }

    /// Mean negative log-likelihood over the rows named in `spec`.
    pub fn cross_entropy(&mut self, logits: NodeId, spec: CrossEntropySpec) -> Result<NodeId> {
        let (rows, n) = require_rank2("cross_entropy", self.value(logits))?;
        let CrossEntropySpec { rows: active, targets, candidates } = spec;
        if active.is_empty() {
            return Err(Error::InvalidInput("cross entropy over zero rows".into()));
        }
        if targets.len() != active.len() || candidates.as_ref().is_some_and(|c| c.len() != active.len()) {
            return Err(shape_err("cross_entropy", "rows, targets and candidates must align".into()));
        }
        let lv = self.value(logits).data();
        let mut probs = Vec::new();
        let mut total = T::zero();
        for (k, (&r, &t)) in active.iter().zip(&targets).enumerate() {
            if r >= rows || t >= n {
                return Err(shape_err("cross_entropy", format!("row {r} / target {t} out of range")));
            }
            let row = &lv[r * n..(r + 1) * n];
            let base = probs.len();
            let target_pos = match &candidates {
                Some(c) => {
                    let cols = &c[k];
                    probs.extend(cols.iter().map(|&j| row[j]));
                    cols.iter()
                        .position(|&j| j == t)
                        .ok_or_else(|| Error::InvalidInput(format!("target {t} missing from candidates of row {r}")))?
                }
                None => {
                    probs.extend_from_slice(row);
                    t
                }
            };
            let p = &mut probs[base..];
            let (max, lse) = log_sum_exp(p);
            total = total + (lse + max - p[target_pos]);
            for v in p.iter_mut() {
                *v = (*v - max - lse).exp();
            }
        }
        let loss = total / T::from_f64(active.len() as f64);
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy { logits, rows: active, targets, candidates, probs },
            rg,
        ))
    }

    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        let s = self.value(x).data().iter().copied().sum();
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::scalar(s), Op::Sum { x }, rg))
    }

    pub fn mean(&mut self, x: NodeId) -> Result<NodeId> {
        let v = self.value(x);
        if v.numel() == 0 {
            return Err(Error::InvalidInput("mean of empty tensor".into()));
        }
        let s = v.data().iter().copied().sum::<T>() / T::from_f64(v.numel() as f64);
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::scalar(s), Op::Mean { x }, rg))
    }

    /// Multiplies by a caller-drawn mask (entries `0` or `1/(1-p)`).
    pub fn dropout(&mut self, x: NodeId, mask: Vec<T>) -> Result<NodeId> {
        let v = self.value(x);
        if mask.len() != v.numel() {
            return Err(shape_err("dropout", format!("mask of {} for {} values", mask.len(), v.numel())));
        }
        let data = v.data().iter().zip(&mask).map(|(&a, &m)| a * m).collect();
        let t = Tensor::new(v.shape().to_vec(), data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::Dropout { x, mask }, rg))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients<T>> {
        if self.value(loss).numel() != 1 {
            return Err(Error::InvalidInput(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if node.requires_grad {
                self.backprop_node(node, &g, &mut grads);
            }
            grads[i] = Some(g);
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn acc<'a>(&self, grads: &'a mut [Option<Vec<T>>], id: NodeId) -> Option<&'a mut Vec<T>> {
        let node = &self.nodes[id.0];
        if !node.requires_grad {
            return None;
        }
        Some(grads[id.0].get_or_insert_with(|| vec![T::zero(); node.value.numel()]))
    }

    fn backprop_node(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (m, k) = (self.value(*a).shape()[0], self.value(*a).shape()[1]);
                let n = self.value(*b).shape()[1];
                if let Some(ga) = self.acc(grads, *a) {
                    matmul_bt_acc(g, self.value(*b).data(), ga, m, n, k);
                }
                if let Some(gb) = self.acc(grads, *b) {
                    matmul_at_acc(self.value(*a).data(), g, gb, m, k, n);
                }
            }
            Op::MatMulBT { a, b } => {
                let (m, k) = (self.value(*a).shape()[0], self.value(*a).shape()[1]);
                let n = self.value(*b).shape()[0];
                if let Some(ga) = self.acc(grads, *a) {
                    matmul_acc(g, self.value(*b).data(), ga, m, n, k);
                }
                if let Some(gb) = self.acc(grads, *b) {
                    matmul_at_acc(g, self.value(*a).data(), gb, m, n, k);
                }
            }
            Op::Add { a, b } => {
                for id in [*a, *b] {
                    if let Some(ga) = self.acc(grads, id) {
                        add_into(ga, g);
                    }
                }
            }
            Op::Sub { a, b } => {
                if let Some(ga) = self.acc(grads, *a) {
                    add_into(ga, g);
                }
                if let Some(gb) = self.acc(grads, *b) {
                    for (o, &v) in gb.iter_mut().zip(g) {
                        *o = *o - v;
                    }
                }
            }
            Op::Mul { a, b } => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                if let Some(ga) = self.acc(grads, *a) {
                    for ((o, &gv), &y) in ga.iter_mut().zip(g).zip(bv) {
                        *o = *o + gv * y;
                    }
                }
                if let Some(gb) = self.acc(grads, *b) {
                    for ((o, &gv), &x) in gb.iter_mut().zip(g).zip(av) {
                        *o = *o + gv * x;
                    }
                }
            }
            Op::AddRow { x, bias } => {
                let n = self.value(*bias).numel();
                if let Some(gx) = self.acc(grads, *x) {
                    add_into(gx, g);
                }
                if let Some(gb) = self.acc(grads, *bias) {
                    for row in g.chunks(n) {
                        add_into(gb, row);
                    }
                }
            }
            Op::Scale { x, c } => {
                if let Some(gx) = self.acc(grads, *x) {
                    for (o, &v) in gx.iter_mut().zip(g) {
                        *o = *o + v * *c;
                    }
                }
            }
            Op::Gelu { x } => {
                let xv = self.value(*x).data();
                if let Some(gx) = self.acc(grads, *x) {
                    for ((o, &gv), &v) in gx.iter_mut().zip(g).zip(xv) {
                        *o = *o + gv * gelu_grad(v);
                    }
                }
            }
            Op::Softmax { x } => {
                let y = node.value.data();
                let n = node.value.cols();
                if let Some(gx) = self.acc(grads, *x) {
                    for ((gr, yr), orow) in g.chunks(n).zip(y.chunks(n)).zip(gx.chunks_mut(n)) {
                        let s = dot(gr, yr);
                        for ((o, &gv), &yv) in orow.iter_mut().zip(gr).zip(yr) {
                            *o = *o + yv * (gv - s);
                        }
                    }
                }
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let n = self.value(*gamma).numel();
                let gam = self.value(*gamma).data();
                if let Some(gg) = self.acc(grads, *gamma) {
                    for (gr, hr) in g.chunks(n).zip(xhat.chunks(n)) {
                        for ((o, &gv), &h) in gg.iter_mut().zip(gr).zip(hr) {
                            *o = *o + gv * h;
                        }
                    }
                }
                if let Some(gb) = self.acc(grads, *beta) {
                    for gr in g.chunks(n) {
                        add_into(gb, gr);
                    }
                }
                if let Some(gx) = self.acc(grads, *x) {
                    let nf = T::from_f64(n as f64);
                    let mut dh = vec![T::zero(); n];
                    for (r, ((gr, hr), orow)) in g.chunks(n).zip(xhat.chunks(n)).zip(gx.chunks_mut(n)).enumerate() {
                        for c in 0..n {
                            dh[c] = gr[c] * gam[c];
                        }
                        let mean_dh = dh.iter().copied().sum::<T>() / nf;
                        let mean_dhh = dot(&dh, hr) / nf;
                        for c in 0..n {
                            orow[c] = orow[c] + rstd[r] * (dh[c] - mean_dh - hr[c] * mean_dhh);
                        }
                    }
                }
            }
            Op::Gather { table, ids } => {
                let n = self.value(*table).cols();
                if let Some(gt) = self.acc(grads, *table) {
                    for (k, &id) in ids.iter().enumerate() {
                        let id = id as usize;
                        add_into(&mut gt[id * n..(id + 1) * n], &g[k * n..(k + 1) * n]);
                    }
                }
            }
            Op::Attention { qkv, segments, n_heads, probs } => {
                let w = self.value(*qkv).cols();
                let d = w / 3;
                let dh = d / n_heads;
                let scale = T::one() / T::from_f64(dh as f64).sqrt();
                let qv = self.value(*qkv).data();
                let Some(gq) = self.acc(grads, *qkv) else { return };
                let mut pbase = 0;
                let mut dp = Vec::new();
                for &(start, len) in segments {
                    for h in 0..*n_heads {
                        let qo = h * dh;
                        let ko = d + h * dh;
                        let vo = 2 * d + h * dh;
                        for i in 0..len {
                            let p = &probs[pbase + i * len..pbase + i * len + i + 1];
                            let go = &g[(start + i) * d + qo..(start + i) * d + qo + dh];
                            dp.clear();
                            for (j, &pj) in p.iter().enumerate() {
                                let vrow = (start + j) * w + vo;
                                dp.push(dot(go, &qv[vrow..vrow + dh]));
                                for (o, &gv) in gq[vrow..vrow + dh].iter_mut().zip(go) {
                                    *o = *o + pj * gv;
                                }
                            }
                            let s = dot(p, &dp);
                            let qrow = (start + i) * w + qo;
                            for (j, &pj) in p.iter().enumerate() {
                                let ds = pj * (dp[j] - s) * scale;
                                if ds == T::zero() {
                                    continue;
                                }
                                let krow = (start + j) * w + ko;
                                for e in 0..dh {
                                    let kv = qv[krow + e];
                                    let qe = qv[qrow + e];
                                    gq[qrow + e] = gq[qrow + e] + ds * kv;
                                    gq[krow + e] = gq[krow + e] + ds * qe;
                                }
                            }
                        }
                        pbase += len * len;
                    }
                }
            }
            Op::SegmentMean { x, ranges } => {
                let n = self.value(*x).cols();
                if let Some(gx) = self.acc(grads, *x) {
                    for (r, &(s, e)) in ranges.iter().enumerate() {
                        let inv = T::one() / T::from_f64((e - s) as f64);
                        let gr = &g[r * n..(r + 1) * n];
                        for row in s..e {
                            for (o, &gv) in gx[row * n..(row + 1) * n].iter_mut().zip(gr) {
                                *o = *o + gv * inv;
                            }
                        }
                    }
                }
            }
            Op::NormalizeRows { x, norms } => {
                let n = self.value(*x).cols();
                let y = node.value.data();
                if let Some(gx) = self.acc(grads, *x) {
                    for (r, &norm) in norms.iter().enumerate() {
                        let yr = &y[r * n..(r + 1) * n];
                        let gr = &g[r * n..(r + 1) * n];
                        let s = dot(yr, gr);
                        for c in 0..n {
                            gx[r * n + c] = gx[r * n + c] + (gr[c] - yr[c] * s) / norm;
                        }
                    }
                }
            }
            Op::CrossEntropy { logits, rows, targets, candidates, probs } => {
                let n = self.value(*logits).cols();
                let scale = g[0] / T::from_f64(rows.len() as f64);
                if let Some(gl) = self.acc(grads, *logits) {
                    let mut base = 0;
                    for (k, (&r, &t)) in rows.iter().zip(targets).enumerate() {
                        let grow = &mut gl[r * n..(r + 1) * n];
                        match candidates {
                            Some(c) => {
                                for (q, &j) in c[k].iter().enumerate() {
                                    let onehot = if j == t { T::one() } else { T::zero() };
                                    grow[j] = grow[j] + scale * (probs[base + q] - onehot);
                                }
                                base += c[k].len();
                            }
                            None => {
                                for j in 0..n {
                                    let onehot = if j == t { T::one() } else { T::zero() };
                                    grow[j] = grow[j] + scale * (probs[base + j] - onehot);
                                }
                                base += n;
                            }
                        }
                    }
                }
            }
            Op::Sum { x } => {
                if let Some(gx) = self.acc(grads, *x) {
                    for o in gx.iter_mut() {
                        *o = *o + g[0];
                    }
                }
            }
            Op::Mean { x } => {
                let inv = g[0] / T::from_f64(self.value(*x).numel() as f64);
                if let Some(gx) = self.acc(grads, *x) {
                    for o in gx.iter_mut() {
                        *o = *o + inv;
                    }
                }
            }
            Op::Dropout { x, mask } => {
                if let Some(gx) = self.acc(grads, *x) {
                    for ((o, &gv), &m) in gx.iter_mut().zip(g).zip(mask) {
                        *o = *o + gv * m;
                    }
                }
            }
        }
    }
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (o, &v) in dst.iter_mut().zip(src) {
        *o = *o + v;
    }
}

/// Returns `(max, log Σ exp(v - max))`.
fn log_sum_exp<T: Scalar>(v: &[T]) -> (T, T) {
    let max = v.iter().copied().fold(T::neg_infinity(), T::max);
    let s: T = v.iter().map(|&x| (x - max).exp()).sum();
    (max, s.ln())
}

pub(crate) fn softmax_in_place<T: Scalar>(v: &mut [T]) {
    let max = v.iter().copied().fold(T::neg_infinity(), T::max);
    let mut s = T::zero();
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        s = s + *x;
    }
    for x in v.iter_mut() {
        *x = *x / s;
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu<T: Scalar>(x: T) -> T {
    let c = T::from_f64(GELU_C);
    let a = T::from_f64(GELU_A);
    let half = T::from_f64(0.5);
    half * x * (T::one() + (c * (x + a * x * x * x)).tanh())
}

fn gelu_grad<T: Scalar>(x: T) -> T {
    let c = T::from_f64(GELU_C);
    let a = T::from_f64(GELU_A);
    let half = T::from_f64(0.5);
    let three = T::from_f64(3.0);
    let t = (c * (x + a * x * x * x)).tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + three * a * x * x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::finite_difference_check;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[3], &[0.0, 0.0, 0.0]));
        let y = g.softmax(x).unwrap();
        for &v in g.value(y).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut g = Graph::<f32>::new();
        let x = g.constant(random(&mut rng, &[5, 7]).cast::<f64>().cast());
        let scaled = g.scale(x, 40.0).unwrap();
        let y = g.softmax(scaled).unwrap();
        for r in 0..5 {
            let row = g.value(y).row(r);
            let s: f32 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-6);
            assert!(row.iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn layer_norm_of_constant_row_is_zero_before_affine() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[1, 4], &[2.5, 2.5, 2.5, 2.5]));
        let gamma = g.constant(t(&[4], &[1.0; 4]));
        let beta = g.constant(t(&[4], &[0.0; 4]));
        let y = g.layer_norm(x, gamma, beta).unwrap();
        assert!(g.value(y).data().iter().all(|v| v.abs() < 1e-9));
        assert!(g.value(y).is_finite());
    }

    #[test]
    fn matmul_with_identity() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let i = g.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let y = g.matmul(a, i).unwrap();
        assert_eq!(g.value(y).data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn matmul_rejects_mismatched_inner_dims() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(t(&[2, 3], &[0.0; 6]));
        let b = g.constant(t(&[2, 2], &[0.0; 4]));
        assert!(matches!(g.matmul(a, b), Err(Error::Shape { .. })));
    }

    #[test]
    fn square_derivative() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::scalar(3.0));
        let y = g.mul(x, x).unwrap();
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.get(x).item(), 6.0);
    }

    #[test]
    fn unused_param_gets_zero_gradient() {
        let mut g = Graph::<f64>::new();
        let used = g.param(t(&[2], &[1.0, 2.0]));
        let unused = g.param(t(&[3], &[1.0, 2.0, 3.0]));
        let c = g.constant(t(&[2], &[5.0, 5.0]));
        let s = g.add(used, c).unwrap();
        let l = g.sum(s).unwrap();
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.get(unused).data(), &[0.0, 0.0, 0.0]);
        assert_eq!(grads.get(used).data(), &[1.0, 1.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::<f64>::new();
        let x = g.param(t(&[2], &[1.0, 2.0]));
        let y = g.scale(x, 2.0).unwrap();
        assert!(g.backward(y).is_err());
    }

    #[test]
    fn cross_entropy_gradient_is_softmax_minus_onehot() {
        let logits = t(&[1, 4], &[0.3, -1.2, 2.0, 0.5]);
        let mut g = Graph::<f64>::new();
        let l = g.param(logits.clone());
        let loss = g
            .cross_entropy(l, CrossEntropySpec { rows: vec![0], targets: vec![2], candidates: None })
            .unwrap();
        let grads = g.backward(loss).unwrap();
        let mut sm = logits.data().to_vec();
        softmax_in_place(&mut sm);
        sm[2] -= 1.0;
        for (a, b) in grads.get(l).data().iter().zip(&sm) {
            assert!((a - b).abs() < 1e-14);
        }
        // and both agree with central differences
        let report = finite_difference_check("xent", &[logits], 1e-5, 1e-6, |g, p| {
            g.cross_entropy(p[0], CrossEntropySpec { rows: vec![0], targets: vec![2], candidates: None })
        })
        .unwrap();
        assert!(report.passed, "{report:?}");
    }

    /// Every op, 10 random points each, analytic vs central differences.
    #[test]
    fn every_op_matches_finite_differences() {
        type Build = fn(&mut Graph<f64>, &[NodeId]) -> Result<NodeId>;
        let cases: Vec<(&str, Vec<Vec<usize>>, Build)> = vec![
            ("matmul", vec![vec![3, 4], vec![4, 2]], |g, p| {
                let y = g.matmul(p[0], p[1])?;
                let y = g.mul(y, y)?;
                g.sum(y)
            }),
            ("matmul_bt", vec![vec![3, 4], vec![5, 4]], |g, p| {
                let y = g.matmul_bt(p[0], p[1])?;
                let y = g.mul(y, y)?;
                g.mean(y)
            }),
            ("add_sub_mul", vec![vec![2, 3], vec![2, 3]], |g, p| {
                let a = g.add(p[0], p[1])?;
                let b = g.sub(p[0], p[1])?;
                let y = g.mul(a, b)?;
                g.sum(y)
            }),
            ("add_row", vec![vec![3, 4], vec![4]], |g, p| {
                let y = g.add_row(p[0], p[1])?;
                let y = g.mul(y, y)?;
                g.sum(y)
            }),
            ("gelu", vec![vec![2, 5]], |g, p| {
                let y = g.gelu(p[0])?;
                let y = g.scale(y, 1.7)?;
                let y = g.mul(y, y)?;
                g.sum(y)
            }),
            ("softmax", vec![vec![3, 4], vec![3, 4]], |g, p| {
                let y = g.softmax(p[0])?;
                let y = g.mul(y, p[1])?;
                g.sum(y)
            }),
            ("layer_norm", vec![vec![3, 5], vec![5], vec![5], vec![3, 5]], |g, p| {
                let y = g.layer_norm(p[0], p[1], p[2])?;
                let y = g.mul(y, p[3])?;
                g.sum(y)
            }),
            ("gather", vec![vec![4, 3], vec![5, 3]], |g, p| {
                let y = g.gather(p[0], &[2, 0, 2, 3, 1])?;
                let y = g.mul(y, p[1])?;
                g.sum(y)
            }),
            ("causal_attention", vec![vec![7, 12], vec![7, 4]], |g, p| {
                let y = g.causal_attention(p[0], &[(0, 3), (3, 4)], 2)?;
                let y = g.mul(y, p[1])?;
                g.sum(y)
            }),
            ("segment_mean", vec![vec![6, 3], vec![2, 3]], |g, p| {
                let y = g.segment_mean(p[0], &[(1, 4), (4, 6)])?;
                let y = g.mul(y, p[1])?;
                g.sum(y)
            }),
            ("normalize_rows", vec![vec![3, 4], vec![3, 4]], |g, p| {
                let y = g.normalize_rows(p[0])?;
                let y = g.mul(y, p[1])?;
                g.sum(y)
            }),
            ("cross_entropy", vec![vec![3, 5]], |g, p| {
                g.cross_entropy(
                    p[0],
                    CrossEntropySpec {
                        rows: vec![0, 2],
                        targets: vec![1, 4],
                        candidates: Some(vec![vec![0, 1, 3], vec![4, 2]]),
                    },
                )
            }),
            ("dropout", vec![vec![2, 3]], |g, p| {
                let y = g.dropout(p[0], vec![2.0, 0.0, 2.0, 2.0, 2.0, 0.0])?;
                let y = g.mul(y, y)?;
                g.sum(y)
            }),
        ];
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for (name, shapes, build) in cases {
            for _ in 0..10 {
                let params: Vec<_> = shapes.iter().map(|s| random(&mut rng, s)).collect();
                let report = finite_difference_check(name, &params, 1e-5, 1e-4, build).unwrap();
                assert!(report.passed, "{report:?}");
            }
        }
    }

    #[test]
    fn attention_is_causal_and_segmented() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let base = random(&mut rng, &[5, 6]);
        let run = |qkv: Tensor<f64>| {
            let mut g = Graph::new();
            let x = g.constant(qkv);
            let y = g.causal_attention(x, &[(0, 2), (2, 3)], 1).unwrap();
            g.value(y).clone()
        };
        let a = run(base.clone());
        let mut perturbed = base;
        // alter the last row of the second segment
        for v in &mut perturbed.data_mut()[4 * 6..] {
            *v += 1.0;
        }
        let b = run(perturbed);
        assert_eq!(a.data()[..4 * 2], b.data()[..4 * 2]);
        assert_ne!(a.row(4), b.row(4));
    }

    #[test]
    fn forward_is_bitwise_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let qkv = random(&mut rng, &[6, 12]).cast::<f32>();
        let run = || {
            let mut g = Graph::<f32>::new();
            let x = g.constant(qkv.clone());
            let y = g.causal_attention(x, &[(0, 6)], 2).unwrap();
            let y = g.gelu(y).unwrap();
            g.value(y).clone()
        };
        assert_eq!(run(), run());
    }
}
