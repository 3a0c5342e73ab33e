//! Reverse-mode automatic differentiation over matrix-valued nodes.
//!
//! A [`Tape`] is a Wengert list: every primitive appends one node holding its
//! result matrix, and [`Tape::backward`] walks the list in exact reverse
//! creation order, accumulating vector-Jacobian products into `f64` buffers.
//! Nodes whose ancestry contains no trainable parameter are skipped entirely,
//! which is what makes adapter-only training cheap.
//!
//! The tape is confined to a single thread per training step; matrices it
//! references are immutable and shared.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::numeric::matrix::{frobenius_norm, matmul, matmul_nt, matmul_tn, Matrix};

pub(crate) const RMSNORM_EPS: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(pub(crate) usize);

#[derive(Clone, Debug)]
enum Op {
    Leaf { trainable: bool },
    MatMul(NodeId, NodeId),
    MatMulNT(NodeId, NodeId),
    MatMulTN(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Hadamard(NodeId, NodeId),
    Scale(NodeId, f64),
    Gelu(NodeId),
    RmsNorm(NodeId),
    MulRowBroadcast(NodeId, NodeId),
    CausalSoftmax(NodeId),
    SliceRows(NodeId, usize),
    SliceCols(NodeId, usize),
    ConcatRows(Vec<NodeId>),
    ConcatCols(Vec<NodeId>),
    GatherRows(NodeId, Arc<Vec<u32>>),
    RowBlend(NodeId, NodeId, Arc<Vec<bool>>),
    SubstituteRow(NodeId, usize, NodeId),
    CrossEntropySum { logits: NodeId, targets: Arc<Vec<u32>>, mask: Arc<Vec<bool>> },
    Sum(NodeId),
    FrobNorm(NodeId),
}

struct Node {
    value: Matrix,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Matrix {
        &self.nodes[id.0].value
    }

    fn push(&mut self, value: Matrix, op: Op, needs_grad: bool) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node { value, op, needs_grad });
        id
    }

    fn ng(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    /// Constant input; no gradient flows into it.
    pub fn leaf(&mut self, value: Matrix) -> NodeId {
        self.push(value, Op::Leaf { trainable: false }, false)
    }

    /// Trainable parameter; `backward` produces a gradient for it.
    pub fn param(&mut self, value: Matrix) -> NodeId {
        self.push(value, Op::Leaf { trainable: true }, true)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = matmul(self.value(a), self.value(b))?;
        let g = self.ng(a) || self.ng(b);
        Ok(self.push(v, Op::MatMul(a, b), g))
    }

    /// `a * b^T`.
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = matmul_nt(self.value(a), self.value(b))?;
        let g = self.ng(a) || self.ng(b);
        Ok(self.push(v, Op::MatMulNT(a, b), g))
    }

    /// `a^T * b`.
    pub fn matmul_tn(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = matmul_tn(self.value(a), self.value(b))?;
        let g = self.ng(a) || self.ng(b);
        Ok(self.push(v, Op::MatMulTN(a, b), g))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).add(self.value(b))?;
        let g = self.ng(a) || self.ng(b);
        Ok(self.push(v, Op::Add(a, b), g))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).sub(self.value(b))?;
        let g = self.ng(a) || self.ng(b);
        Ok(self.push(v, Op::Sub(a, b), g))
    }

    pub fn hadamard(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).hadamard(self.value(b))?;
        let g = self.ng(a) || self.ng(b);
        Ok(self.push(v, Op::Hadamard(a, b), g))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = self.value(a).scale(c);
        let g = self.ng(a);
        self.push(v, Op::Scale(a, c), g)
    }

    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(gelu_scalar);
        let g = self.ng(a);
        self.push(v, Op::Gelu(a), g)
    }

    /// Row-wise `x / sqrt(mean(x^2) + eps)` (no learned scale).
    pub fn rmsnorm(&mut self, a: NodeId) -> NodeId {
        let x = self.value(a);
        let (rows, cols) = x.shape();
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            let r = row_rms(x.row(i));
            for &v in x.row(i) {
                data.push((v as f64 / r) as f32);
            }
        }
        let v = Matrix::from_vec_unchecked(rows, cols, data);
        let g = self.ng(a);
        self.push(v, Op::RmsNorm(a), g)
    }

    /// `x (m x n)` scaled columnwise by `gamma (1 x n)`.
    pub fn mul_row_broadcast(&mut self, x: NodeId, gamma: NodeId) -> Result<NodeId> {
        let xv = self.value(x);
        let gv = self.value(gamma);
        if gv.rows() != 1 || gv.cols() != xv.cols() {
            return Err(Error::DimMismatch {
                op: "mul_row_broadcast",
                left_rows: xv.rows(),
                left_cols: xv.cols(),
                right_rows: gv.rows(),
                right_cols: gv.cols(),
            });
        }
        let (rows, cols) = xv.shape();
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push((xv.get(i, j) as f64 * gv.get(0, j) as f64) as f32);
            }
        }
        let v = Matrix::from_vec_unchecked(rows, cols, data);
        let g = self.ng(x) || self.ng(gamma);
        Ok(self.push(v, Op::MulRowBroadcast(x, gamma), g))
    }

    /// Row-wise softmax over a square score matrix masked to `j <= i`;
    /// masked-out entries are exactly zero.
    pub fn causal_softmax(&mut self, a: NodeId) -> Result<NodeId> {
        let x = self.value(a);
        let (rows, cols) = x.shape();
        if rows != cols {
            return Err(Error::DimMismatch {
                op: "causal_softmax",
                left_rows: rows,
                left_cols: cols,
                right_rows: rows,
                right_cols: cols,
            });
        }
        let mut data = vec![0.0f32; rows * cols];
        for i in 0..rows {
            let row = x.row(i);
            let lim = i + 1;
            let mut mx = f64::NEG_INFINITY;
            for &v in &row[..lim] {
                mx = mx.max(v as f64);
            }
            let mut denom = 0.0f64;
            let mut exps = vec![0.0f64; lim];
            for (j, &v) in row[..lim].iter().enumerate() {
                let e = ((v as f64) - mx).exp();
                exps[j] = e;
                denom += e;
            }
            for j in 0..lim {
                data[i * cols + j] = (exps[j] / denom) as f32;
            }
        }
        let v = Matrix::from_vec_unchecked(rows, cols, data);
        let g = self.ng(a);
        Ok(self.push(v, Op::CausalSoftmax(a), g))
    }

    pub fn slice_rows(&mut self, a: NodeId, start: usize, len: usize) -> NodeId {
        let x = self.value(a);
        let cols = x.cols();
        let data = x.data()[start * cols..(start + len) * cols].to_vec();
        let v = Matrix::from_vec_unchecked(len, cols, data);
        let g = self.ng(a);
        self.push(v, Op::SliceRows(a, start), g)
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, len: usize) -> NodeId {
        let x = self.value(a);
        let rows = x.rows();
        let mut data = Vec::with_capacity(rows * len);
        for i in 0..rows {
            data.extend_from_slice(&x.row(i)[start..start + len]);
        }
        let v = Matrix::from_vec_unchecked(rows, len, data);
        let g = self.ng(a);
        self.push(v, Op::SliceCols(a, start), g)
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let m = self.value(p);
            if m.cols() != cols {
                return Err(Error::DimMismatch {
                    op: "concat_rows",
                    left_rows: rows,
                    left_cols: cols,
                    right_rows: m.rows(),
                    right_cols: m.cols(),
                });
            }
            rows += m.rows();
            data.extend_from_slice(m.data());
        }
        let v = Matrix::from_vec_unchecked(rows, cols, data);
        let g = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(v, Op::ConcatRows(parts.to_vec()), g))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let rows = self.value(parts[0]).rows();
        let mut cols = 0;
        for &p in parts {
            let m = self.value(p);
            if m.rows() != rows {
                return Err(Error::DimMismatch {
                    op: "concat_cols",
                    left_rows: rows,
                    left_cols: cols,
                    right_rows: m.rows(),
                    right_cols: m.cols(),
                });
            }
            cols += m.cols();
        }
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(i));
            }
        }
        let v = Matrix::from_vec_unchecked(rows, cols, data);
        let g = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(v, Op::ConcatCols(parts.to_vec()), g))
    }

    /// Embedding lookup: output row `t` is row `ids[t]` of the source.
    pub fn gather_rows(&mut self, a: NodeId, ids: Arc<Vec<u32>>) -> NodeId {
        let x = self.value(a);
        let cols = x.cols();
        let mut data = Vec::with_capacity(ids.len() * cols);
        for &id in ids.iter() {
            data.extend_from_slice(x.row(id as usize));
        }
        let v = Matrix::from_vec_unchecked(ids.len(), cols, data);
        let g = self.ng(a);
        self.push(v, Op::GatherRows(a, ids), g)
    }

    /// Row-wise select: output row `i` comes from `b` where `take_b[i]`,
    /// else from `a`.
    pub fn row_blend(&mut self, a: NodeId, b: NodeId, take_b: Arc<Vec<bool>>) -> Result<NodeId> {
        let av = self.value(a);
        let bv = self.value(b);
        if av.shape() != bv.shape() || take_b.len() != av.rows() {
            return Err(Error::DimMismatch {
                op: "row_blend",
                left_rows: av.rows(),
                left_cols: av.cols(),
                right_rows: bv.rows(),
                right_cols: bv.cols(),
            });
        }
        let cols = av.cols();
        let mut data = Vec::with_capacity(av.numel());
        for i in 0..av.rows() {
            data.extend_from_slice(if take_b[i] { bv.row(i) } else { av.row(i) });
        }
        let v = Matrix::from_vec_unchecked(av.rows(), cols, data);
        let g = self.ng(a) || self.ng(b);
        Ok(self.push(v, Op::RowBlend(a, b, take_b), g))
    }

    /// Replaces one row of `base` with `vec` (a `1 x cols` node).
    pub fn substitute_row(&mut self, base: NodeId, row: usize, vec: NodeId) -> Result<NodeId> {
        let bv = self.value(base);
        let vv = self.value(vec);
        if vv.rows() != 1 || vv.cols() != bv.cols() || row >= bv.rows() {
            return Err(Error::DimMismatch {
                op: "substitute_row",
                left_rows: bv.rows(),
                left_cols: bv.cols(),
                right_rows: vv.rows(),
                right_cols: vv.cols(),
            });
        }
        let mut data = bv.data().to_vec();
        data[row * bv.cols()..(row + 1) * bv.cols()].copy_from_slice(vv.row(0));
        let v = Matrix::from_vec_unchecked(bv.rows(), bv.cols(), data);
        let g = self.ng(base) || self.ng(vec);
        Ok(self.push(v, Op::SubstituteRow(base, row, vec), g))
    }

    /// Sum of `logsumexp(row) - logit[target]` over positions where `mask`
    /// is set; a `1x1` node in nats. Divide by the mask count separately to
    /// get a mean.
    pub fn cross_entropy_sum(
        &mut self,
        logits: NodeId,
        targets: Arc<Vec<u32>>,
        mask: Arc<Vec<bool>>,
    ) -> Result<NodeId> {
        let lv = self.value(logits);
        if targets.len() != lv.rows() || mask.len() != lv.rows() {
            return Err(Error::InvalidArg(format!(
                "cross_entropy_sum: {} logit rows vs {} targets / {} mask entries",
                lv.rows(),
                targets.len(),
                mask.len()
            )));
        }
        let mut total = 0.0f64;
        for t in 0..lv.rows() {
            if !mask[t] {
                continue;
            }
            let row = lv.row(t);
            total += row_logsumexp(row) - row[targets[t] as usize] as f64;
        }
        let v = Matrix::from_vec_unchecked(1, 1, vec![total as f32]);
        let g = self.ng(logits);
        Ok(self.push(v, Op::CrossEntropySum { logits, targets, mask }, g))
    }

    /// Sum of all entries as a `1x1` node.
    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let mut acc = 0.0f64;
        for &v in self.value(a).data() {
            acc += v as f64;
        }
        let g = self.ng(a);
        let v = Matrix::from_vec_unchecked(1, 1, vec![acc as f32]);
        self.push(v, Op::Sum(a), g)
    }

    /// Frobenius norm as a `1x1` node; at zero the subgradient 0 is used.
    pub fn frob_norm(&mut self, a: NodeId) -> NodeId {
        let n = frobenius_norm(self.value(a));
        let g = self.ng(a);
        let v = Matrix::from_vec_unchecked(1, 1, vec![n as f32]);
        self.push(v, Op::FrobNorm(a), g)
    }

    /// Reverse pass from a scalar loss node. Visits nodes in exact reverse
    /// creation order; returns per-node gradients for trainable leaves.
    pub fn backward(&self, loss: NodeId) -> Result<GradMap> {
        if loss.0 >= self.nodes.len() {
            return Err(Error::DetachedNode);
        }
        let lv = &self.nodes[loss.0].value;
        if lv.shape() != (1, 1) {
            return Err(Error::NonScalarLoss { rows: lv.rows(), cols: lv.cols() });
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.apply_vjp(idx, &g, &mut grads);
            // Re-store for trainable leaves so callers can read them out.
            if matches!(self.nodes[idx].op, Op::Leaf { trainable: true }) {
                grads[idx] = Some(g);
            }
        }
        Ok(GradMap { grads, tape_len: self.nodes.len(), trainable: self.trainable_flags() })
    }

    fn trainable_flags(&self) -> Vec<bool> {
        self.nodes
            .iter()
            .map(|n| matches!(n.op, Op::Leaf { trainable: true }))
            .collect()
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], id: NodeId, add: impl FnOnce(&mut [f64])) {
        if !self.nodes[id.0].needs_grad {
            return;
        }
        let slot = &mut grads[id.0];
        if slot.is_none() {
            *slot = Some(vec![0.0; self.nodes[id.0].value.numel()]);
        }
        add(slot.as_mut().unwrap());
    }

    #[allow(clippy::too_many_lines)]
    fn apply_vjp(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf { .. } => {}
            Op::MatMul(a, b) => {
                let (m, n) = node.value.shape();
                let av = self.value(*a);
                let bv = self.value(*b);
                let k = av.cols();
                if self.ng(*a) {
                    // da += g * b^T
                    let bt = bv.transpose();
                    self.accumulate(grads, *a, |da| {
                        for i in 0..m {
                            for j in 0..n {
                                let gij = g[i * n + j];
                                let btr = bt.row(j);
                                let dar = &mut da[i * k..(i + 1) * k];
                                for kk in 0..k {
                                    dar[kk] += gij * btr[kk] as f64;
                                }
                            }
                        }
                    });
                }
                if self.ng(*b) {
                    // db += a^T * g
                    self.accumulate(grads, *b, |db| {
                        for i in 0..m {
                            let ar = av.row(i);
                            let gr = &g[i * n..(i + 1) * n];
                            for kk in 0..k {
                                let aik = ar[kk] as f64;
                                let dbr = &mut db[kk * n..(kk + 1) * n];
                                for j in 0..n {
                                    dbr[j] += aik * gr[j];
                                }
                            }
                        }
                    });
                }
            }
            Op::MatMulNT(a, b) => {
                // y = a * b^T; a (m x k), b (n x k), y (m x n)
                let (m, n) = node.value.shape();
                let av = self.value(*a);
                let bv = self.value(*b);
                let k = av.cols();
                if self.ng(*a) {
                    // da += g * b
                    self.accumulate(grads, *a, |da| {
                        for i in 0..m {
                            let gr = &g[i * n..(i + 1) * n];
                            let dar = &mut da[i * k..(i + 1) * k];
                            for j in 0..n {
                                let gij = gr[j];
                                let br = bv.row(j);
                                for kk in 0..k {
                                    dar[kk] += gij * br[kk] as f64;
                                }
                            }
                        }
                    });
                }
                if self.ng(*b) {
                    // db += g^T * a
                    self.accumulate(grads, *b, |db| {
                        for i in 0..m {
                            let gr = &g[i * n..(i + 1) * n];
                            let ar = av.row(i);
                            for j in 0..n {
                                let gij = gr[j];
                                let dbr = &mut db[j * k..(j + 1) * k];
                                for kk in 0..k {
                                    dbr[kk] += gij * ar[kk] as f64;
                                }
                            }
                        }
                    });
                }
            }
            Op::MatMulTN(a, b) => {
                // y = a^T * b; a (k x m), b (k x n), y (m x n)
                let (m, n) = node.value.shape();
                let av = self.value(*a);
                let bv = self.value(*b);
                let k = av.rows();
                if self.ng(*a) {
                    // da += b * g^T, da is (k x m)
                    self.accumulate(grads, *a, |da| {
                        for kk in 0..k {
                            let br = bv.row(kk);
                            let dar = &mut da[kk * m..(kk + 1) * m];
                            for j in 0..n {
                                let bkj = br[j] as f64;
                                for i in 0..m {
                                    dar[i] += bkj * g[i * n + j];
                                }
                            }
                        }
                    });
                }
                if self.ng(*b) {
                    // db += a * g, db is (k x n)
                    self.accumulate(grads, *b, |db| {
                        for kk in 0..k {
                            let ar = av.row(kk);
                            let dbr = &mut db[kk * n..(kk + 1) * n];
                            for i in 0..m {
                                let aki = ar[i] as f64;
                                let gr = &g[i * n..(i + 1) * n];
                                for j in 0..n {
                                    dbr[j] += aki * gr[j];
                                }
                            }
                        }
                    });
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, |da| {
                    for (d, &gv) in da.iter_mut().zip(g) {
                        *d += gv;
                    }
                });
                self.accumulate(grads, *b, |db| {
                    for (d, &gv) in db.iter_mut().zip(g) {
                        *d += gv;
                    }
                });
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, |da| {
                    for (d, &gv) in da.iter_mut().zip(g) {
                        *d += gv;
                    }
                });
                self.accumulate(grads, *b, |db| {
                    for (d, &gv) in db.iter_mut().zip(g) {
                        *d -= gv;
                    }
                });
            }
            Op::Hadamard(a, b) => {
                let av = self.value(*a);
                let bv = self.value(*b);
                self.accumulate(grads, *a, |da| {
                    for (i, d) in da.iter_mut().enumerate() {
                        *d += g[i] * bv.data()[i] as f64;
                    }
                });
                self.accumulate(grads, *b, |db| {
                    for (i, d) in db.iter_mut().enumerate() {
                        *d += g[i] * av.data()[i] as f64;
                    }
                });
            }
            Op::Scale(a, c) => {
                let c = *c;
                self.accumulate(grads, *a, |da| {
                    for (d, &gv) in da.iter_mut().zip(g) {
                        *d += c * gv;
                    }
                });
            }
            Op::Gelu(a) => {
                let av = self.value(*a);
                self.accumulate(grads, *a, |da| {
                    for (i, d) in da.iter_mut().enumerate() {
                        *d += g[i] * gelu_prime(av.data()[i] as f64);
                    }
                });
            }
            Op::RmsNorm(a) => {
                let av = self.value(*a);
                let (rows, cols) = av.shape();
                self.accumulate(grads, *a, |da| {
                    for i in 0..rows {
                        let x = av.row(i);
                        let gr = &g[i * cols..(i + 1) * cols];
                        let r = row_rms(x);
                        let mut dot = 0.0f64;
                        for j in 0..cols {
                            dot += gr[j] * x[j] as f64;
                        }
                        let coef = dot / (cols as f64 * r * r * r);
                        let dar = &mut da[i * cols..(i + 1) * cols];
                        for j in 0..cols {
                            dar[j] += gr[j] / r - x[j] as f64 * coef;
                        }
                    }
                });
            }
            Op::MulRowBroadcast(x, gamma) => {
                let xv = self.value(*x);
                let gv = self.value(*gamma);
                let (rows, cols) = xv.shape();
                self.accumulate(grads, *x, |dx| {
                    for i in 0..rows {
                        for j in 0..cols {
                            dx[i * cols + j] += g[i * cols + j] * gv.get(0, j) as f64;
                        }
                    }
                });
                self.accumulate(grads, *gamma, |dg| {
                    for i in 0..rows {
                        for j in 0..cols {
                            dg[j] += g[i * cols + j] * xv.get(i, j) as f64;
                        }
                    }
                });
            }
            Op::CausalSoftmax(a) => {
                let pv = &node.value;
                let (rows, cols) = pv.shape();
                self.accumulate(grads, *a, |da| {
                    for i in 0..rows {
                        let lim = i + 1;
                        let p = pv.row(i);
                        let gr = &g[i * cols..(i + 1) * cols];
                        let mut dot = 0.0f64;
                        for j in 0..lim {
                            dot += gr[j] * p[j] as f64;
                        }
                        let dar = &mut da[i * cols..(i + 1) * cols];
                        for j in 0..lim {
                            dar[j] += p[j] as f64 * (gr[j] - dot);
                        }
                    }
                });
            }
            Op::SliceRows(a, start) => {
                let cols = node.value.cols();
                let rows = node.value.rows();
                let off = start * cols;
                self.accumulate(grads, *a, |da| {
                    for i in 0..rows * cols {
                        da[off + i] += g[i];
                    }
                });
            }
            Op::SliceCols(a, start) => {
                let (rows, len) = node.value.shape();
                let src_cols = self.value(*a).cols();
                self.accumulate(grads, *a, |da| {
                    for i in 0..rows {
                        for j in 0..len {
                            da[i * src_cols + start + j] += g[i * len + j];
                        }
                    }
                });
            }
            Op::ConcatRows(parts) => {
                let cols = node.value.cols();
                let mut row_off = 0;
                for &p in parts {
                    let prows = self.value(p).rows();
                    let off = row_off * cols;
                    self.accumulate(grads, p, |dp| {
                        for i in 0..prows * cols {
                            dp[i] += g[off + i];
                        }
                    });
                    row_off += prows;
                }
            }
            Op::ConcatCols(parts) => {
                let (rows, total_cols) = node.value.shape();
                let mut col_off = 0;
                for &p in parts {
                    let pcols = self.value(p).cols();
                    let off = col_off;
                    self.accumulate(grads, p, |dp| {
                        for i in 0..rows {
                            for j in 0..pcols {
                                dp[i * pcols + j] += g[i * total_cols + off + j];
                            }
                        }
                    });
                    col_off += pcols;
                }
            }
            Op::GatherRows(a, ids) => {
                let cols = node.value.cols();
                self.accumulate(grads, *a, |da| {
                    for (t, &id) in ids.iter().enumerate() {
                        let dst = &mut da[id as usize * cols..(id as usize + 1) * cols];
                        let src = &g[t * cols..(t + 1) * cols];
                        for j in 0..cols {
                            dst[j] += src[j];
                        }
                    }
                });
            }
            Op::RowBlend(a, b, take_b) => {
                let cols = node.value.cols();
                self.accumulate(grads, *a, |da| {
                    for (i, &tb) in take_b.iter().enumerate() {
                        if !tb {
                            for j in 0..cols {
                                da[i * cols + j] += g[i * cols + j];
                            }
                        }
                    }
                });
                self.accumulate(grads, *b, |db| {
                    for (i, &tb) in take_b.iter().enumerate() {
                        if tb {
                            for j in 0..cols {
                                db[i * cols + j] += g[i * cols + j];
                            }
                        }
                    }
                });
            }
            Op::SubstituteRow(base, row, vec) => {
                let cols = node.value.cols();
                let row = *row;
                self.accumulate(grads, *base, |db| {
                    for (i, chunk) in g.chunks(cols).enumerate() {
                        if i == row {
                            continue;
                        }
                        for j in 0..cols {
                            db[i * cols + j] += chunk[j];
                        }
                    }
                });
                self.accumulate(grads, *vec, |dv| {
                    for j in 0..cols {
                        dv[j] += g[row * cols + j];
                    }
                });
            }
            Op::CrossEntropySum { logits, targets, mask } => {
                let lv = self.value(*logits);
                let (rows, cols) = lv.shape();
                let gs = g[0];
                self.accumulate(grads, *logits, |dl| {
                    for t in 0..rows {
                        if !mask[t] {
                            continue;
                        }
                        let row = lv.row(t);
                        let lse = row_logsumexp(row);
                        let dst = &mut dl[t * cols..(t + 1) * cols];
                        for j in 0..cols {
                            let p = ((row[j] as f64) - lse).exp();
                            dst[j] += gs * (p - f64::from(j as u32 == targets[t]));
                        }
                    }
                });
            }
            Op::Sum(a) => {
                let gs = g[0];
                self.accumulate(grads, *a, |da| {
                    for d in da.iter_mut() {
                        *d += gs;
                    }
                });
            }
            Op::FrobNorm(a) => {
                let av = self.value(*a);
                let n = frobenius_norm(av);
                if n > 0.0 {
                    let gs = g[0] / n;
                    self.accumulate(grads, *a, |da| {
                        for (d, &x) in da.iter_mut().zip(av.data()) {
                            *d += gs * x as f64;
                        }
                    });
                }
            }
        }
    }
}

/// Per-parameter gradients produced by [`Tape::backward`].
pub struct GradMap {
    grads: Vec<Option<Vec<f64>>>,
    trainable: Vec<bool>,
    tape_len: usize,
}

impl GradMap {
    /// Gradient for a trainable leaf, rounded to `f32`. A trainable leaf
    /// untouched by the loss gets a zero gradient; any other node is
    /// detached.
    pub fn grad(&self, tape: &Tape, id: NodeId) -> Result<Matrix> {
        let g = self.grad_f64(id)?;
        let (rows, cols) = tape.value(id).shape();
        match g {
            Some(buf) => Ok(Matrix::from_vec_unchecked(
                rows,
                cols,
                buf.iter().map(|&v| v as f32).collect(),
            )),
            None => Ok(Matrix::zeros(rows, cols)),
        }
    }

    /// Raw `f64` gradient buffer for a trainable leaf (None if unreached).
    pub fn grad_f64(&self, id: NodeId) -> Result<Option<&Vec<f64>>> {
        if id.0 >= self.tape_len || !self.trainable[id.0] {
            return Err(Error::DetachedNode);
        }
        Ok(self.grads[id.0].as_ref())
    }
}

fn row_rms(row: &[f32]) -> f64 {
    let mut acc = 0.0f64;
    for &v in row {
        acc += v as f64 * v as f64;
    }
    (acc / row.len() as f64 + RMSNORM_EPS).sqrt()
}

fn row_logsumexp(row: &[f32]) -> f64 {
    let mut mx = f64::NEG_INFINITY;
    for &v in row {
        mx = mx.max(v as f64);
    }
    let mut acc = 0.0f64;
    for &v in row {
        acc += ((v as f64) - mx).exp();
    }
    mx + acc.ln()
}

pub(crate) fn gelu_scalar(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_prime(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4;
    let u = C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let sech2 = 1.0 - t * t;
    0.5 * (1.0 + t) + 0.5 * x * sech2 * C * (1.0 + 3.0 * 0.044715 * x * x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::Rng;

    #[test]
    fn loss_sum_gives_all_ones_gradient() {
        let mut tape = Tape::new();
        let w = tape.param(Matrix::from_vec(2, 2, vec![1.0, -2.0, 3.0, 4.0]).unwrap());
        let loss = tape.sum(w);
        let grads = tape.backward(loss).unwrap();
        let gw = grads.grad(&tape, w).unwrap();
        assert_eq!(gw.data(), &[1.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn loss_frobenius_squared_gives_two_w() {
        // ||W||_F^2 = sum(W ⊙ W); gradient is 2W.
        let mut tape = Tape::new();
        let w = tape.param(Matrix::from_vec(2, 2, vec![1.0, -2.0, 3.0, 0.5]).unwrap());
        let sq = tape.hadamard(w, w).unwrap();
        let loss = tape.sum(sq);
        let grads = tape.backward(loss).unwrap();
        let gw = grads.grad(&tape, w).unwrap();
        assert_eq!(gw.data(), &[2.0, -4.0, 6.0, 1.0]);
    }

    #[test]
    fn detached_node_is_typed_error() {
        let mut tape = Tape::new();
        let w = tape.param(Matrix::zeros(2, 2));
        let c = tape.leaf(Matrix::zeros(2, 2));
        let s = tape.add(w, c).unwrap();
        let loss = tape.sum(s);
        let grads = tape.backward(loss).unwrap();
        assert!(matches!(grads.grad(&tape, c), Err(Error::DetachedNode)));
        assert!(matches!(grads.grad(&tape, s), Err(Error::DetachedNode)));
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut tape = Tape::new();
        let w = tape.param(Matrix::zeros(2, 2));
        assert!(matches!(tape.backward(w), Err(Error::NonScalarLoss { .. })));
    }

    #[test]
    fn untouched_param_gets_zero_gradient() {
        let mut tape = Tape::new();
        let w = tape.param(Matrix::zeros(2, 2));
        let u = tape.param(Matrix::zeros(3, 1));
        let loss = tape.sum(w);
        let grads = tape.backward(loss).unwrap();
        let gu = grads.grad(&tape, u).unwrap();
        assert_eq!(gu.data(), &[0.0, 0.0, 0.0]);
    }

    use crate::numeric::reference as ref64;

    fn check_gradients(
        name: &str,
        build: impl Fn(&mut Tape, &[Matrix]) -> NodeId,
        reference: impl Fn(&[ref64::M64]) -> f64,
        params: &[Matrix],
    ) {
        // Analytic gradients from the tape.
        let mut tape = Tape::new();
        let loss = build(&mut tape, params);
        let grads = tape.backward(loss).unwrap();
        let mut param_ids = Vec::new();
        for (i, n) in tape.nodes.iter().enumerate() {
            if matches!(n.op, Op::Leaf { trainable: true }) {
                param_ids.push(NodeId(i));
            }
        }
        assert_eq!(param_ids.len(), params.len(), "{name}: builder must track all params");

        // Forward values must agree with the reference too.
        let as_ref64: Vec<ref64::M64> = params
            .iter()
            .map(|m| ref64::M64::from_f32(m.rows(), m.cols(), m.data()))
            .collect();
        let ref_loss = reference(&as_ref64);
        let tape_loss = tape.value(loss).get(0, 0) as f64;
        assert!(
            (ref_loss - tape_loss).abs() <= 1e-4 * ref_loss.abs().max(1.0),
            "{name}: forward disagrees with f64 reference: {tape_loss} vs {ref_loss}"
        );

        let h = 1e-3f32;
        for (which, &pid) in param_ids.iter().enumerate() {
            let analytic = grads.grad(&tape, pid).unwrap();
            for idx in 0..params[which].numel() {
                let mut eval = |delta: f32| -> f64 {
                    let mut ps = as_ref64.clone();
                    // Perturb the 32-bit value, promote to f64.
                    let perturbed = params[which].data()[idx] + delta;
                    ps[which].data[idx] = perturbed as f64;
                    reference(&ps)
                };
                let fd = (eval(h) - eval(-h)) / (2.0 * h as f64);
                let a = analytic.data()[idx] as f64;
                let denom = fd.abs().max(a.abs()).max(1e-4);
                assert!(
                    (a - fd).abs() / denom <= 1e-3,
                    "{name}: param {which} entry {idx}: analytic {a} vs fd {fd}"
                );
            }
        }
    }

    fn rand_m(rng: &mut Rng, r: usize, c: usize) -> Matrix {
        Matrix::from_fn(r, c, |_, _| rng.normal_f32() * 0.5)
    }

    #[test]
    fn every_primitive_matches_finite_differences() {
        use ref64::*;
        let mut rng = Rng::new(2024);

        // Three-layer composition: matmul -> gelu -> matmul_nt -> rmsnorm -> sum.
        let a = rand_m(&mut rng, 3, 4);
        let b = rand_m(&mut rng, 4, 5);
        let c = rand_m(&mut rng, 2, 5);
        check_gradients(
            "matmul/gelu/matmul_nt/rmsnorm",
            |t, ps| {
                let a = t.param(ps[0].clone());
                let b = t.param(ps[1].clone());
                let c = t.param(ps[2].clone());
                let h = t.matmul(a, b).unwrap();
                let h = t.gelu(h);
                let h = t.matmul_nt(h, c).unwrap();
                let h = t.rmsnorm(h);
                t.sum(h)
            },
            |ps| sum(&rmsnorm(&mm_nt(&gelu(&mm(&ps[0], &ps[1])), &ps[2]))),
            &[a, b, c],
        );

        // matmul_tn, hadamard, scale, sub.
        let a = rand_m(&mut rng, 4, 3);
        let b = rand_m(&mut rng, 4, 3);
        check_gradients(
            "matmul_tn/hadamard/scale/sub",
            |t, ps| {
                let a = t.param(ps[0].clone());
                let b = t.param(ps[1].clone());
                let h = t.matmul_tn(a, b).unwrap(); // 3x3
                let hh = t.hadamard(h, h).unwrap();
                let s = t.scale(hh, 0.7);
                let d = t.sub(s, h).unwrap();
                t.sum(d)
            },
            |ps| {
                let h = mm_tn(&ps[0], &ps[1]);
                let hh = zip(&h, &h, |x, y| x * y);
                let s = map(&hh, |x| 0.7 * x);
                sum(&zip(&s, &h, |x, y| x - y))
            },
            &[a, b],
        );

        // causal softmax + slices + concat + add.
        let q = rand_m(&mut rng, 4, 6);
        let w = rand_m(&mut rng, 4, 3);
        check_gradients(
            "causal_softmax/slice/concat",
            |t, ps| {
                let q = t.param(ps[0].clone());
                let w = t.param(ps[1].clone());
                let qh = t.slice_cols(q, 0, 3);
                let kh = t.slice_cols(q, 3, 3);
                let scores = t.matmul_nt(qh, kh).unwrap();
                let scores = t.scale(scores, 0.5);
                let p = t.causal_softmax(scores).unwrap();
                let o = t.matmul(p, w).unwrap();
                let top = t.slice_rows(o, 0, 2);
                let bottom = t.slice_rows(o, 2, 2);
                let swapped = t.concat_rows(&[bottom, top]).unwrap();
                let both = t.concat_cols(&[swapped, o]).unwrap();
                let added = t.add(both, both).unwrap();
                t.sum(added)
            },
            |ps| {
                let qh = slice_cols(&ps[0], 0, 3);
                let kh = slice_cols(&ps[0], 3, 3);
                let scores = map(&mm_nt(&qh, &kh), |x| 0.5 * x);
                let p = causal_softmax(&scores);
                let o = mm(&p, &ps[1]);
                let top = slice_rows(&o, 0, 2);
                let bottom = slice_rows(&o, 2, 2);
                let swapped = concat_rows(&[&bottom, &top]);
                let both = concat_cols(&[&swapped, &o]);
                sum(&zip(&both, &both, |x, y| x + y))
            },
            &[q, w],
        );

        // gather + row ops + substitution + cross entropy + frobenius norm.
        let emb = rand_m(&mut rng, 6, 4);
        let alt = rand_m(&mut rng, 5, 4);
        let vrow = rand_m(&mut rng, 1, 4);
        let proj = rand_m(&mut rng, 3, 4);
        let ids = vec![0u32, 2, 4, 1, 5];
        let take = vec![false, true, false, true, false];
        let targets = vec![0u32, 2, 1, 0, 2];
        let ce_mask = vec![true, true, false, true, true];
        check_gradients(
            "gather/row_blend/substitute/cross_entropy/frob_norm",
            |t, ps| {
                let emb = t.param(ps[0].clone());
                let alt = t.param(ps[1].clone());
                let vrow = t.param(ps[2].clone());
                let proj = t.param(ps[3].clone());
                let h = t.gather_rows(emb, Arc::new(ids.clone()));
                let h = t.row_blend(h, alt, Arc::new(take.clone())).unwrap();
                let h = t.substitute_row(h, 2, vrow).unwrap();
                let logits = t.matmul_nt(h, proj).unwrap(); // 5x3
                let ce = t
                    .cross_entropy_sum(logits, Arc::new(targets.clone()), Arc::new(ce_mask.clone()))
                    .unwrap();
                let n = t.frob_norm(h);
                let total = t.add(ce, n).unwrap();
                t.scale(total, 0.5)
            },
            |ps| {
                let h = gather_rows(&ps[0], &ids);
                let h = row_blend(&h, &ps[1], &take);
                let h = substitute_row(&h, 2, &ps[2]);
                let logits = mm_nt(&h, &ps[3]);
                let ce = cross_entropy_sum(&logits, &targets, &ce_mask);
                0.5 * (ce + frob(&h))
            },
            &[emb, alt, vrow, proj],
        );

        // mul_row_broadcast (final norm scale).
        let x = rand_m(&mut rng, 3, 5);
        let gamma = rand_m(&mut rng, 1, 5);
        check_gradients(
            "mul_row_broadcast",
            |t, ps| {
                let x = t.param(ps[0].clone());
                let g = t.param(ps[1].clone());
                let y = t.mul_row_broadcast(x, g).unwrap();
                let yy = t.hadamard(y, y).unwrap();
                t.sum(yy)
            },
            |ps| {
                let y = mul_row_broadcast(&ps[0], &ps[1]);
                sum(&zip(&y, &y, |a, b| a * b))
            },
            &[x, gamma],
        );
    }

    #[test]
    fn causal_softmax_rows_sum_to_one() {
        let mut rng = Rng::new(5);
        let mut tape = Tape::new();
        let s = tape.leaf(rand_m(&mut rng, 8, 8));
        let p = tape.causal_softmax(s).unwrap();
        let pv = tape.value(p);
        for i in 0..8 {
            let sum: f64 = pv.row(i).iter().map(|&v| v as f64).sum();
            assert!((sum - 1.0).abs() <= 1e-5, "row {i} sums to {sum}");
            for j in (i + 1)..8 {
                assert_eq!(pv.get(i, j), 0.0);
            }
        }
    }
}
