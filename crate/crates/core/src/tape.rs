//! Reverse-mode differentiation over a linear tape.
//!
//! Operations are recorded in creation order, so every node's inputs have
//! smaller ids and a single reverse sweep visits each node exactly once.
//! Only nodes created with [`Tape::leaf`] receive gradients; everything
//! else propagates but never exposes its accumulator.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

const LN_EPS: f64 = 1e-5;
/// Additive mask value for causal attention. Finite (so the NaN/Inf guard
/// passes) yet large enough that `exp` underflows to exactly 0 in both
/// precisions, which keeps causality bit-exact.
const MASK_NEG: f64 = -1e30;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Constant,
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    MulRow(NodeId, NodeId),
    Scale(NodeId, f64),
    Sum(NodeId),
    Gelu(NodeId),
    Softmax(NodeId),
    LayerNorm(NodeId),
    Gather(NodeId, Vec<usize>),
    CausalMask(NodeId),
    CrossEntropy(NodeId, Vec<usize>),
    SliceRows(NodeId, usize),
    SliceCols(NodeId, usize),
    ConcatCols(Vec<NodeId>),
    AddRowsAt(NodeId, NodeId, usize),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op,
    requires_grad: bool,
    grad: Option<Tensor<T>>,
}

pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    fn push(&mut self, value: Tensor<T>, op: Op, requires_grad: bool) -> NodeId {
        self.nodes.push(Node { value, op, requires_grad, grad: None });
        NodeId(self.nodes.len() - 1)
    }

    fn rg(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    /// Accumulated gradient of a leaf, if `backward` has reached it.
    pub fn grad(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.nodes[id.0].grad.as_ref()
    }

    pub fn reset_grads(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    /// A differentiable input. Its gradient accumulates across `backward` calls.
    pub fn leaf(&mut self, value: Tensor<T>) -> NodeId {
        self.push(value, Op::Leaf, true)
    }

    /// A non-differentiable input.
    pub fn constant(&mut self, value: Tensor<T>) -> NodeId {
        self.push(value, Op::Constant, false)
    }

    // ── Forward primitives ──────────────────────────────────────────────

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if va.rank() != 2 || vb.rank() != 2 || va.cols() != vb.rows() {
            return Err(shape_err("matmul", &[va.shape(), vb.shape()]));
        }
        let (m, k, n) = (va.rows(), va.cols(), vb.cols());
        let out = Tensor::matrix(m, n, matmul_nn(va.data(), vb.data(), m, k, n))?;
        out.ensure_finite("matmul")?;
        let grad = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::MatMul(a, b), grad))
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        let va = &self.nodes[a.0].value;
        if va.rank() != 2 {
            return Err(shape_err("transpose", &[va.shape()]));
        }
        let (m, n) = (va.rows(), va.cols());
        let mut data = vec![T::ZERO; m * n];
        for i in 0..m {
            for j in 0..n {
                data[j * m + i] = va.get2(i, j);
            }
        }
        let out = Tensor::matrix(n, m, data)?;
        let grad = self.rg(a);
        Ok(self.push(out, Op::Transpose(a), grad))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if va.shape() != vb.shape() {
            return Err(shape_err("add", &[va.shape(), vb.shape()]));
        }
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x + y).collect();
        let out = Tensor::new(va.shape().to_vec(), data)?;
        out.ensure_finite("add")?;
        let grad = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Add(a, b), grad))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if va.shape() != vb.shape() {
            return Err(shape_err("mul", &[va.shape(), vb.shape()]));
        }
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x * y).collect();
        let out = Tensor::new(va.shape().to_vec(), data)?;
        out.ensure_finite("mul")?;
        let grad = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Mul(a, b), grad))
    }

    /// Broadcast add of a length-n row vector to every row of an m×n matrix.
    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> Result<NodeId> {
        let (va, vr) = (&self.nodes[a.0].value, &self.nodes[row.0].value);
        if va.rank() != 2 || vr.rank() != 1 || va.cols() != vr.numel() {
            return Err(shape_err("add_row", &[va.shape(), vr.shape()]));
        }
        let (m, n) = (va.rows(), va.cols());
        let mut data = va.data().to_vec();
        for i in 0..m {
            for j in 0..n {
                data[i * n + j] += vr.data()[j];
            }
        }
        let out = Tensor::matrix(m, n, data)?;
        out.ensure_finite("add_row")?;
        let grad = self.rg(a) || self.rg(row);
        Ok(self.push(out, Op::AddRow(a, row), grad))
    }

    /// Broadcast multiply of every row of an m×n matrix by a length-n vector.
    pub fn mul_row(&mut self, a: NodeId, row: NodeId) -> Result<NodeId> {
        let (va, vr) = (&self.nodes[a.0].value, &self.nodes[row.0].value);
        if va.rank() != 2 || vr.rank() != 1 || va.cols() != vr.numel() {
            return Err(shape_err("mul_row", &[va.shape(), vr.shape()]));
        }
        let (m, n) = (va.rows(), va.cols());
        let mut data = va.data().to_vec();
        for i in 0..m {
            for j in 0..n {
                data[i * n + j] *= vr.data()[j];
            }
        }
        let out = Tensor::matrix(m, n, data)?;
        out.ensure_finite("mul_row")?;
        let grad = self.rg(a) || self.rg(row);
        Ok(self.push(out, Op::MulRow(a, row), grad))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        let va = &self.nodes[a.0].value;
        let cc = T::from_f64(c);
        let out = va.map(|x| x * cc);
        out.ensure_finite("scale")?;
        let grad = self.rg(a);
        Ok(self.push(out, Op::Scale(a, c), grad))
    }

    /// Reduce all elements to a scalar, summing in flat index order.
    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        let va = &self.nodes[a.0].value;
        let mut acc = T::ZERO;
        for &x in va.data() {
            acc += x;
        }
        let out = Tensor::scalar(acc);
        out.ensure_finite("sum")?;
        let grad = self.rg(a);
        Ok(self.push(out, Op::Sum(a), grad))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: NodeId) -> Result<NodeId> {
        let va = &self.nodes[a.0].value;
        let out = va.map(|x| gelu_fwd(x));
        out.ensure_finite("gelu")?;
        let grad = self.rg(a);
        Ok(self.push(out, Op::Gelu(a), grad))
    }

    /// Row-wise softmax over the last axis.
    pub fn softmax(&mut self, a: NodeId) -> Result<NodeId> {
        let va = &self.nodes[a.0].value;
        if va.rank() != 2 {
            return Err(shape_err("softmax", &[va.shape()]));
        }
        let (m, n) = (va.rows(), va.cols());
        let mut data = vec![T::ZERO; m * n];
        for i in 0..m {
            softmax_row(va.row(i), &mut data[i * n..(i + 1) * n]);
        }
        let out = Tensor::matrix(m, n, data)?;
        out.ensure_finite("softmax")?;
        let grad = self.rg(a);
        Ok(self.push(out, Op::Softmax(a), grad))
    }

    /// Row-wise normalization to zero mean, unit variance. No affine part;
    /// compose with [`Tape::mul_row`] / [`Tape::add_row`] for gain and bias.
    pub fn layer_norm(&mut self, a: NodeId) -> Result<NodeId> {
        let va = &self.nodes[a.0].value;
        if va.rank() != 2 {
            return Err(shape_err("layer_norm", &[va.shape()]));
        }
        let (m, n) = (va.rows(), va.cols());
        let inv_n = T::from_f64(1.0 / n as f64);
        let eps = T::from_f64(LN_EPS);
        let mut data = vec![T::ZERO; m * n];
        for i in 0..m {
            let row = va.row(i);
            let mut mean = T::ZERO;
            for &x in row {
                mean += x;
            }
            mean *= inv_n;
            let mut var = T::ZERO;
            for &x in row {
                let d = x - mean;
                var += d * d;
            }
            var *= inv_n;
            let inv_std = T::ONE / (var + eps).sqrt();
            for j in 0..n {
                data[i * n + j] = (row[j] - mean) * inv_std;
            }
        }
        let out = Tensor::matrix(m, n, data)?;
        out.ensure_finite("layer_norm")?;
        let grad = self.rg(a);
        Ok(self.push(out, Op::LayerNorm(a), grad))
    }

    /// Gather rows of a table by index (embedding lookup).
    pub fn gather(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId> {
        let vt = &self.nodes[table.0].value;
        if vt.rank() != 2 {
            return Err(shape_err("gather", &[vt.shape()]));
        }
        let (rows, n) = (vt.rows(), vt.cols());
        let mut data = Vec::with_capacity(ids.len() * n);
        for &id in ids {
            if id >= rows {
                return Err(Error::TokenOutOfRange { token: id, vocab: rows });
            }
            data.extend_from_slice(vt.row(id));
        }
        let out = Tensor::matrix(ids.len(), n, data)?;
        let grad = self.rg(table);
        Ok(self.push(out, Op::Gather(table, ids.to_vec()), grad))
    }

    /// Causal attention score mask on a square matrix: entries above the
    /// diagonal are replaced by a large negative constant, so position i
    /// is exactly independent of scores at positions j > i.
    pub fn causal_mask(&mut self, a: NodeId) -> Result<NodeId> {
        let va = &self.nodes[a.0].value;
        if va.rank() != 2 || va.rows() != va.cols() {
            return Err(shape_err("causal_mask", &[va.shape()]));
        }
        let n = va.rows();
        let neg = T::from_f64(MASK_NEG);
        let mut data = va.data().to_vec();
        for i in 0..n {
            for j in (i + 1)..n {
                data[i * n + j] = neg;
            }
        }
        let out = Tensor::matrix(n, n, data)?;
        let grad = self.rg(a);
        Ok(self.push(out, Op::CausalMask(a), grad))
    }

    /// Per-row cross-entropy of logits against integer targets
    /// (log-sum-exp minus the target logit). Output is a length-m vector.
    pub fn cross_entropy(&mut self, logits: NodeId, targets: &[usize]) -> Result<NodeId> {
        let vz = &self.nodes[logits.0].value;
        if vz.rank() != 2 || vz.rows() != targets.len() {
            return Err(shape_err("cross_entropy", &[vz.shape()]));
        }
        let (m, n) = (vz.rows(), vz.cols());
        let mut data = Vec::with_capacity(m);
        for (i, &tgt) in targets.iter().enumerate() {
            if tgt >= n {
                return Err(Error::TokenOutOfRange { token: tgt, vocab: n });
            }
            let row = vz.row(i);
            data.push(log_sum_exp(row) - row[tgt]);
        }
        let out = Tensor::vector(data);
        out.ensure_finite("cross_entropy")?;
        let grad = self.rg(logits);
        Ok(self.push(out, Op::CrossEntropy(logits, targets.to_vec()), grad))
    }

    pub fn slice_rows(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let va = &self.nodes[a.0].value;
        if va.rank() != 2 || start + len > va.rows() {
            return Err(shape_err("slice_rows", &[va.shape()]));
        }
        let n = va.cols();
        let data = va.data()[start * n..(start + len) * n].to_vec();
        let out = Tensor::matrix(len, n, data)?;
        let grad = self.rg(a);
        Ok(self.push(out, Op::SliceRows(a, start), grad))
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let va = &self.nodes[a.0].value;
        if va.rank() != 2 || start + len > va.cols() {
            return Err(shape_err("slice_cols", &[va.shape()]));
        }
        let (m, n) = (va.rows(), va.cols());
        let mut data = Vec::with_capacity(m * len);
        for i in 0..m {
            data.extend_from_slice(&va.data()[i * n + start..i * n + start + len]);
        }
        let out = Tensor::matrix(m, len, data)?;
        let grad = self.rg(a);
        Ok(self.push(out, Op::SliceCols(a, start), grad))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::InvalidSpec("concat_cols of zero parts".into()));
        }
        let m = self.nodes[parts[0].0].value.rows();
        let mut total = 0;
        for &p in parts {
            let v = &self.nodes[p.0].value;
            if v.rank() != 2 || v.rows() != m {
                return Err(shape_err("concat_cols", &[v.shape()]));
            }
            total += v.cols();
        }
        let mut data = Vec::with_capacity(m * total);
        for i in 0..m {
            for &p in parts {
                data.extend_from_slice(self.nodes[p.0].value.row(i));
            }
        }
        let out = Tensor::matrix(m, total, data)?;
        let grad = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), grad))
    }

    /// `base` with `delta` added to the row block starting at `offset`.
    /// This is the perturbation-application primitive.
    pub fn add_rows_at(&mut self, base: NodeId, delta: NodeId, offset: usize) -> Result<NodeId> {
        let (vb, vd) = (&self.nodes[base.0].value, &self.nodes[delta.0].value);
        if vb.rank() != 2
            || vd.rank() != 2
            || vb.cols() != vd.cols()
            || offset + vd.rows() > vb.rows()
        {
            return Err(shape_err("add_rows_at", &[vb.shape(), vd.shape()]));
        }
        let n = vb.cols();
        let mut data = vb.data().to_vec();
        for i in 0..vd.rows() {
            for j in 0..n {
                data[(offset + i) * n + j] += vd.get2(i, j);
            }
        }
        let out = Tensor::matrix(vb.rows(), n, data)?;
        out.ensure_finite("add_rows_at")?;
        let grad = self.rg(base) || self.rg(delta);
        Ok(self.push(out, Op::AddRowsAt(base, delta, offset), grad))
    }

    // ── Backward ────────────────────────────────────────────────────────

    /// Propagate d(loss)/d(leaf) into every leaf's accumulator. `loss`
    /// must be scalar. Repeated calls accumulate; use [`Tape::reset_grads`]
    /// to start over.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if !self.nodes[loss.0].value.is_scalar() {
            return Err(Error::NotScalar { shape: self.nodes[loss.0].value.shape().to_vec() });
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::scalar(T::ONE));

        for i in (0..=loss.0).rev() {
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            if !self.nodes[i].requires_grad {
                continue;
            }
            let op = self.nodes[i].op.clone();
            match op {
                Op::Leaf => {
                    match &mut self.nodes[i].grad {
                        Some(acc) => acc.add_assign(&g),
                        slot => *slot = Some(g),
                    }
                    continue;
                }
                Op::Constant => continue,
                Op::MatMul(a, b) => {
                    let (m, k) = (self.nodes[a.0].value.rows(), self.nodes[a.0].value.cols());
                    let n = self.nodes[b.0].value.cols();
                    if self.rg(a) {
                        let da = matmul_nt(g.data(), self.nodes[b.0].value.data(), m, n, k);
                        accumulate(&mut grads, a, Tensor::matrix(m, k, da)?);
                    }
                    if self.rg(b) {
                        let db = matmul_tn(self.nodes[a.0].value.data(), g.data(), k, m, n);
                        accumulate(&mut grads, b, Tensor::matrix(k, n, db)?);
                    }
                }
                Op::Transpose(a) => {
                    let (m, n) = (g.rows(), g.cols());
                    let mut da = vec![T::ZERO; m * n];
                    for i2 in 0..m {
                        for j in 0..n {
                            da[j * m + i2] = g.get2(i2, j);
                        }
                    }
                    accumulate(&mut grads, a, Tensor::matrix(n, m, da)?);
                }
                Op::Add(a, b) => {
                    if self.rg(a) {
                        accumulate(&mut grads, a, g.clone());
                    }
                    if self.rg(b) {
                        accumulate(&mut grads, b, g);
                    }
                }
                Op::Mul(a, b) => {
                    if self.rg(a) {
                        let va = &self.nodes[b.0].value;
                        let da = ew_mul(g.data(), va.data());
                        accumulate(&mut grads, a, Tensor::new(g.shape().to_vec(), da)?);
                    }
                    if self.rg(b) {
                        let vb = &self.nodes[a.0].value;
                        let db = ew_mul(g.data(), vb.data());
                        accumulate(&mut grads, b, Tensor::new(g.shape().to_vec(), db)?);
                    }
                }
                Op::AddRow(a, row) => {
                    if self.rg(a) {
                        accumulate(&mut grads, a, g.clone());
                    }
                    if self.rg(row) {
                        let (m, n) = (g.rows(), g.cols());
                        let mut dr = vec![T::ZERO; n];
                        for i2 in 0..m {
                            for j in 0..n {
                                dr[j] += g.get2(i2, j);
                            }
                        }
                        accumulate(&mut grads, row, Tensor::vector(dr));
                    }
                }
                Op::MulRow(a, row) => {
                    let (m, n) = (g.rows(), g.cols());
                    if self.rg(a) {
                        let vr = &self.nodes[row.0].value;
                        let mut da = vec![T::ZERO; m * n];
                        for i2 in 0..m {
                            for j in 0..n {
                                da[i2 * n + j] = g.get2(i2, j) * vr.data()[j];
                            }
                        }
                        accumulate(&mut grads, a, Tensor::matrix(m, n, da)?);
                    }
                    if self.rg(row) {
                        let va = &self.nodes[a.0].value;
                        let mut dr = vec![T::ZERO; n];
                        for i2 in 0..m {
                            for j in 0..n {
                                dr[j] += g.get2(i2, j) * va.get2(i2, j);
                            }
                        }
                        accumulate(&mut grads, row, Tensor::vector(dr));
                    }
                }
                Op::Scale(a, c) => {
                    let cc = T::from_f64(c);
                    accumulate(&mut grads, a, g.map(|x| x * cc));
                }
                Op::Sum(a) => {
                    let va = &self.nodes[a.0].value;
                    let gi = g.item();
                    accumulate(&mut grads, a, Tensor::full(va.shape().to_vec(), gi));
                }
                Op::Gelu(a) => {
                    let va = &self.nodes[a.0].value;
                    let da: Vec<T> = va
                        .data()
                        .iter()
                        .zip(g.data())
                        .map(|(&x, &gy)| gy * gelu_bwd(x))
                        .collect();
                    accumulate(&mut grads, a, Tensor::new(va.shape().to_vec(), da)?);
                }
                Op::Softmax(a) => {
                    let y = &self.nodes[i].value;
                    let (m, n) = (y.rows(), y.cols());
                    let mut da = vec![T::ZERO; m * n];
                    for i2 in 0..m {
                        let yr = y.row(i2);
                        let gr = g.row(i2);
                        let mut dot = T::ZERO;
                        for j in 0..n {
                            dot += yr[j] * gr[j];
                        }
                        for j in 0..n {
                            da[i2 * n + j] = yr[j] * (gr[j] - dot);
                        }
                    }
                    accumulate(&mut grads, a, Tensor::matrix(m, n, da)?);
                }
                Op::LayerNorm(a) => {
                    let y = &self.nodes[i].value;
                    let x = &self.nodes[a.0].value;
                    let (m, n) = (y.rows(), y.cols());
                    let inv_n = T::from_f64(1.0 / n as f64);
                    let eps = T::from_f64(LN_EPS);
                    let mut da = vec![T::ZERO; m * n];
                    for i2 in 0..m {
                        let xr = x.row(i2);
                        let yr = y.row(i2);
                        let gr = g.row(i2);
                        let mut mean = T::ZERO;
                        for &v in xr {
                            mean += v;
                        }
                        mean *= inv_n;
                        let mut var = T::ZERO;
                        for &v in xr {
                            let d = v - mean;
                            var += d * d;
                        }
                        var *= inv_n;
                        let inv_std = T::ONE / (var + eps).sqrt();
                        let mut g_mean = T::ZERO;
                        let mut gy_mean = T::ZERO;
                        for j in 0..n {
                            g_mean += gr[j];
                            gy_mean += gr[j] * yr[j];
                        }
                        g_mean *= inv_n;
                        gy_mean *= inv_n;
                        for j in 0..n {
                            da[i2 * n + j] = inv_std * (gr[j] - g_mean - yr[j] * gy_mean);
                        }
                    }
                    accumulate(&mut grads, a, Tensor::matrix(m, n, da)?);
                }
                Op::Gather(table, ids) => {
                    let vt = &self.nodes[table.0].value;
                    let (rows, n) = (vt.rows(), vt.cols());
                    let mut dt = vec![T::ZERO; rows * n];
                    for (i2, &id) in ids.iter().enumerate() {
                        for j in 0..n {
                            dt[id * n + j] += g.get2(i2, j);
                        }
                    }
                    accumulate(&mut grads, table, Tensor::matrix(rows, n, dt)?);
                }
                Op::CausalMask(a) => {
                    let n = g.rows();
                    let mut da = vec![T::ZERO; n * n];
                    for i2 in 0..n {
                        for j in 0..=i2 {
                            da[i2 * n + j] = g.get2(i2, j);
                        }
                    }
                    accumulate(&mut grads, a, Tensor::matrix(n, n, da)?);
                }
                Op::CrossEntropy(logits, targets) => {
                    let vz = &self.nodes[logits.0].value;
                    let (m, n) = (vz.rows(), vz.cols());
                    let mut dz = vec![T::ZERO; m * n];
                    let mut probs = vec![T::ZERO; n];
                    for (i2, &tgt) in targets.iter().enumerate() {
                        softmax_row(vz.row(i2), &mut probs);
                        let gi = g.data()[i2];
                        for j in 0..n {
                            dz[i2 * n + j] = gi * probs[j];
                        }
                        dz[i2 * n + tgt] -= gi;
                    }
                    accumulate(&mut grads, logits, Tensor::matrix(m, n, dz)?);
                }
                Op::SliceRows(a, start) => {
                    let va = &self.nodes[a.0].value;
                    let (m, n) = (va.rows(), va.cols());
                    let mut da = vec![T::ZERO; m * n];
                    for i2 in 0..g.rows() {
                        for j in 0..n {
                            da[(start + i2) * n + j] = g.get2(i2, j);
                        }
                    }
                    accumulate(&mut grads, a, Tensor::matrix(m, n, da)?);
                }
                Op::SliceCols(a, start) => {
                    let va = &self.nodes[a.0].value;
                    let (m, n) = (va.rows(), va.cols());
                    let len = g.cols();
                    let mut da = vec![T::ZERO; m * n];
                    for i2 in 0..m {
                        for j in 0..len {
                            da[i2 * n + start + j] = g.get2(i2, j);
                        }
                    }
                    accumulate(&mut grads, a, Tensor::matrix(m, n, da)?);
                }
                Op::ConcatCols(parts) => {
                    let m = g.rows();
                    let mut off = 0;
                    for &p in &parts {
                        let w = self.nodes[p.0].value.cols();
                        if self.rg(p) {
                            let mut dp = Vec::with_capacity(m * w);
                            for i2 in 0..m {
                                dp.extend_from_slice(&g.row(i2)[off..off + w]);
                            }
                            accumulate(&mut grads, p, Tensor::matrix(m, w, dp)?);
                        }
                        off += w;
                    }
                }
                Op::AddRowsAt(base, delta, offset) => {
                    if self.rg(base) {
                        accumulate(&mut grads, base, g.clone());
                    }
                    if self.rg(delta) {
                        let vd = &self.nodes[delta.0].value;
                        let (r, n) = (vd.rows(), vd.cols());
                        let mut dd = Vec::with_capacity(r * n);
                        for i2 in 0..r {
                            dd.extend_from_slice(g.row(offset + i2));
                        }
                        accumulate(&mut grads, delta, Tensor::matrix(r, n, dd)?);
                    }
                }
            }
        }
        Ok(())
    }
}

fn accumulate<T: Scalar>(grads: &mut [Option<Tensor<T>>], id: NodeId, g: Tensor<T>) {
    match &mut grads[id.0] {
        Some(acc) => acc.add_assign(&g),
        slot => *slot = Some(g),
    }
}

fn shape_err(op: &'static str, shapes: &[&[usize]]) -> Error {
    Error::ShapeMismatch { op, detail: format!("operand shapes {shapes:?}") }
}

// ── Kernels ─────────────────────────────────────────────────────────────

/// C[m×n] = A[m×k] B[k×n], fixed ikj order for reproducible sums.
pub fn matmul_nn<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut c = vec![T::ZERO; m * n];
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            let br = &b[p * n..(p + 1) * n];
            let cr = &mut c[i * n..(i + 1) * n];
            for j in 0..n {
                cr[j] += av * br[j];
            }
        }
    }
    c
}

/// C[m×k] = A[m×n] Bᵀ where B is [k×n].
fn matmul_nt<T: Scalar>(a: &[T], b: &[T], m: usize, n: usize, k: usize) -> Vec<T> {
    let mut c = vec![T::ZERO; m * k];
    for i in 0..m {
        for j in 0..k {
            let mut acc = T::ZERO;
            let ar = &a[i * n..(i + 1) * n];
            let br = &b[j * n..(j + 1) * n];
            for p in 0..n {
                acc += ar[p] * br[p];
            }
            c[i * k + j] = acc;
        }
    }
    c
}

/// C[k×n] = Aᵀ B where A is [m×k], B is [m×n].
fn matmul_tn<T: Scalar>(a: &[T], b: &[T], k: usize, m: usize, n: usize) -> Vec<T> {
    let mut c = vec![T::ZERO; k * n];
    for p in 0..m {
        for i in 0..k {
            let av = a[p * k + i];
            let br = &b[p * n..(p + 1) * n];
            let cr = &mut c[i * n..(i + 1) * n];
            for j in 0..n {
                cr[j] += av * br[j];
            }
        }
    }
    c
}

fn ew_mul<T: Scalar>(a: &[T], b: &[T]) -> Vec<T> {
    a.iter().zip(b).map(|(&x, &y)| x * y).collect()
}

pub fn softmax_row<T: Scalar>(row: &[T], out: &mut [T]) {
    let mut max = row[0];
    for &x in &row[1..] {
        max = max.maximum(x);
    }
    let mut denom = T::ZERO;
    for (o, &x) in out.iter_mut().zip(row) {
        let e = (x - max).exp();
        *o = e;
        denom += e;
    }
    let inv = T::ONE / denom;
    for o in out.iter_mut() {
        *o *= inv;
    }
}

pub fn log_sum_exp<T: Scalar>(row: &[T]) -> T {
    let mut max = row[0];
    for &x in &row[1..] {
        max = max.maximum(x);
    }
    let mut acc = T::ZERO;
    for &x in row {
        acc += (x - max).exp();
    }
    max + acc.ln()
}

fn gelu_fwd<T: Scalar>(x: T) -> T {
    let c = T::from_f64(GELU_C);
    let k = T::from_f64(GELU_K);
    let half = T::from_f64(0.5);
    let u = c * (x + k * x * x * x);
    half * x * (T::ONE + u.tanh())
}

fn gelu_bwd<T: Scalar>(x: T) -> T {
    let c = T::from_f64(GELU_C);
    let k = T::from_f64(GELU_K);
    let half = T::from_f64(0.5);
    let three = T::from_f64(3.0);
    let u = c * (x + k * x * x * x);
    let th = u.tanh();
    let sech2 = T::ONE - th * th;
    half * (T::ONE + th) + half * x * sech2 * c * (T::ONE + three * k * x * x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grad_check::{finite_difference_grad, max_rel_error};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn randn(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor<f64> {
        let n = shape.iter().product();
        let data = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
        Tensor::new(shape, data).unwrap()
    }

    /// Reverse-mode gradient vs central differences for a graph built
    /// from a single leaf up to a scalar loss.
    fn check_grad<F>(x0: &Tensor<f64>, build: F)
    where
        F: Fn(&mut Tape<f64>, NodeId) -> NodeId,
    {
        let mut tape = Tape::new();
        let x = tape.leaf(x0.clone());
        let loss = build(&mut tape, x);
        tape.backward(loss).unwrap();
        let analytic = tape.grad(x).unwrap().clone();

        let numeric = finite_difference_grad(
            |probe| {
                let mut t = Tape::new();
                let p = t.leaf(probe.clone());
                let l = build(&mut t, p);
                Ok(t.value(l).item())
            },
            x0,
            1e-4,
        )
        .unwrap();
        let err = max_rel_error(&analytic, &numeric, 1e-8);
        assert!(err < 1e-5, "max relative error {err}");
    }

    #[test]
    fn softmax_uniform_logits() {
        let mut tape = Tape::<f64>::new();
        let z = tape.constant(Tensor::matrix(1, 4, vec![0.0; 4]).unwrap());
        let y = tape.softmax(z).unwrap();
        for &p in tape.value(y).data() {
            assert_eq!(p, 0.25);
        }
    }

    #[test]
    fn softmax_rows_on_simplex() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut tape = Tape::<f64>::new();
        let z = tape.constant(randn(&mut rng, vec![5, 7]));
        let y = tape.softmax(z).unwrap();
        for i in 0..5 {
            let row = tape.value(y).row(i);
            assert!(row.iter().all(|&p| p >= 0.0));
            let s: f64 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn cross_entropy_uniform_two_way() {
        let mut tape = Tape::<f64>::new();
        let z = tape.constant(Tensor::matrix(1, 2, vec![0.0, 0.0]).unwrap());
        let ce = tape.cross_entropy(z, &[0]).unwrap();
        assert!((tape.value(ce).data()[0] - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn matmul_matches_naive_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = randn(&mut rng, vec![3, 4]);
        let b = randn(&mut rng, vec![4, 2]);
        let mut tape = Tape::new();
        let na = tape.constant(a.clone());
        let nb = tape.constant(b.clone());
        let c = tape.matmul(na, nb).unwrap();
        for i in 0..3 {
            for j in 0..2 {
                let mut want = 0.0;
                for p in 0..4 {
                    want += a.get2(i, p) * b.get2(p, j);
                }
                assert!((tape.value(c).get2(i, j) - want).abs() <= 1e-12 * want.abs().max(1.0));
            }
        }
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut tape = Tape::new();
        let x = tape.leaf(randn(&mut rng, vec![3, 5]));
        let s = tape.sum(x).unwrap();
        tape.backward(s).unwrap();
        assert!(tape.grad(x).unwrap().data().iter().all(|&g| g == 1.0));
    }

    #[test]
    fn cross_entropy_grad_is_softmax_minus_onehot() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let z0 = randn(&mut rng, vec![1, 6]);
        let mut tape = Tape::new();
        let z = tape.leaf(z0.clone());
        let ce = tape.cross_entropy(z, &[2]).unwrap();
        let loss = tape.sum(ce).unwrap();
        tape.backward(loss).unwrap();
        let g = tape.grad(z).unwrap();
        let mut probs = vec![0.0; 6];
        softmax_row(z0.row(0), &mut probs);
        for j in 0..6 {
            let want = probs[j] - if j == 2 { 1.0 } else { 0.0 };
            assert!((g.get2(0, j) - want).abs() < 1e-12);
        }
    }

    #[test]
    fn repeated_backward_accumulates() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.0, 2.0]));
        let s = tape.sum(x).unwrap();
        tape.backward(s).unwrap();
        tape.backward(s).unwrap();
        assert!(tape.grad(x).unwrap().data().iter().all(|&g| g == 2.0));
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.0, 2.0]));
        assert!(matches!(tape.backward(x), Err(Error::NotScalar { .. })));
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::matrix(2, 3, vec![0.0; 6]).unwrap());
        let b = tape.constant(Tensor::matrix(2, 3, vec![0.0; 6]).unwrap());
        assert!(matches!(tape.matmul(a, b), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn non_finite_output_is_rejected() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::vector(vec![1e308]));
        let b = tape.constant(Tensor::vector(vec![1e308]));
        assert!(matches!(tape.add(a, b), Err(Error::NonFinite { .. })));
    }

    #[test]
    fn layer_norm_row_moments() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut tape = Tape::new();
        let x = tape.constant(randn(&mut rng, vec![4, 16]));
        let y = tape.layer_norm(x).unwrap();
        for i in 0..4 {
            let row = tape.value(y).row(i);
            let mean: f64 = row.iter().sum::<f64>() / 16.0;
            let var: f64 = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / 16.0;
            assert!(mean.abs() < 1e-6);
            assert!((var - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn causal_mask_hides_the_future() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let scores = randn(&mut rng, vec![5, 5]);
        let run = |s: &Tensor<f64>| {
            let mut tape = Tape::new();
            let n = tape.constant(s.clone());
            let m = tape.causal_mask(n).unwrap();
            let p = tape.softmax(m).unwrap();
            tape.value(p).clone()
        };
        let base = run(&scores);
        let mut edited = scores.clone();
        for i in 0..5 {
            for j in (i + 1)..5 {
                edited.set2(i, j, 1e6);
            }
        }
        let after = run(&edited);
        // bit-identical everywhere: masked entries never participate
        assert_eq!(base.data(), after.data());
    }

    #[test]
    fn finite_difference_of_square() {
        let f = |x: &Tensor<f64>| Ok(x.data()[0] * x.data()[0]);
        let g = finite_difference_grad(f, &Tensor::vector(vec![3.0]), 1e-4).unwrap();
        assert!((g.data()[0] - 6.0).abs() < 1e-6);
    }

    #[test]
    fn finite_difference_of_constant_is_zero() {
        let f = |_: &Tensor<f64>| Ok(42.0);
        let g = finite_difference_grad(f, &Tensor::vector(vec![1.0, -1.0]), 1e-4).unwrap();
        assert!(g.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn finite_difference_rejects_bad_step() {
        let f = |_: &Tensor<f64>| Ok(0.0);
        assert!(finite_difference_grad(f, &Tensor::vector(vec![0.0]), 0.0).is_err());
    }

    // Gradient check for every primitive against central differences.

    #[test]
    fn grad_matmul() {
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        let b0 = randn(&mut rng, vec![4, 3]);
        check_grad(&randn(&mut rng, vec![2, 4]), |t, x| {
            let b = t.constant(b0.clone());
            let c = t.matmul(x, b).unwrap();
            t.sum(c).unwrap()
        });
        let a0 = randn(&mut rng, vec![2, 4]);
        check_grad(&randn(&mut rng, vec![4, 3]), |t, x| {
            let a = t.constant(a0.clone());
            let c = t.matmul(a, x).unwrap();
            t.sum(c).unwrap()
        });
    }

    #[test]
    fn grad_transpose_and_slices() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let w0 = randn(&mut rng, vec![3, 4]);
        check_grad(&randn(&mut rng, vec![4, 3]), |t, x| {
            let tr = t.transpose(x).unwrap();
            let w = t.constant(w0.clone());
            let p = t.mul(tr, w).unwrap();
            t.sum(p).unwrap()
        });
        check_grad(&randn(&mut rng, vec![5, 4]), |t, x| {
            let s = t.slice_rows(x, 1, 3).unwrap();
            let s2 = t.slice_cols(s, 2, 2).unwrap();
            t.sum(s2).unwrap()
        });
    }

    #[test]
    fn grad_elementwise_and_broadcast() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let y0 = randn(&mut rng, vec![3, 4]);
        check_grad(&randn(&mut rng, vec![3, 4]), |t, x| {
            let y = t.constant(y0.clone());
            let a = t.add(x, y).unwrap();
            let m = t.mul(a, y).unwrap();
            let sc = t.scale(m, 0.37).unwrap();
            t.sum(sc).unwrap()
        });
        let m0 = randn(&mut rng, vec![3, 4]);
        check_grad(&randn(&mut rng, vec![4]), |t, x| {
            let m = t.constant(m0.clone());
            let a = t.add_row(m, x).unwrap();
            let b = t.mul_row(a, x).unwrap();
            t.sum(b).unwrap()
        });
        check_grad(&randn(&mut rng, vec![3, 4]), |t, x| {
            let r0 = t.constant(Tensor::vector(vec![0.5, -1.0, 2.0, 0.1]));
            let a = t.add_row(x, r0).unwrap();
            let b = t.mul_row(a, r0).unwrap();
            t.sum(b).unwrap()
        });
    }

    #[test]
    fn grad_gelu() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        check_grad(&randn(&mut rng, vec![2, 6]), |t, x| {
            let g = t.gelu(x).unwrap();
            t.sum(g).unwrap()
        });
    }

    #[test]
    fn grad_softmax_and_mask() {
        let mut rng = ChaCha8Rng::seed_from_u64(24);
        let w0 = randn(&mut rng, vec![4, 4]);
        check_grad(&randn(&mut rng, vec![4, 4]), |t, x| {
            let m = t.causal_mask(x).unwrap();
            let p = t.softmax(m).unwrap();
            let w = t.constant(w0.clone());
            let wp = t.mul(p, w).unwrap();
            t.sum(wp).unwrap()
        });
    }

    #[test]
    fn grad_layer_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(25);
        let w0 = randn(&mut rng, vec![3, 8]);
        check_grad(&randn(&mut rng, vec![3, 8]), |t, x| {
            let y = t.layer_norm(x).unwrap();
            let w = t.constant(w0.clone());
            let wy = t.mul(y, w).unwrap();
            t.sum(wy).unwrap()
        });
    }

    #[test]
    fn grad_gather_with_repeats() {
        let mut rng = ChaCha8Rng::seed_from_u64(26);
        let w0 = randn(&mut rng, vec![4, 5]);
        check_grad(&randn(&mut rng, vec![6, 5]), |t, x| {
            let g = t.gather(x, &[0, 3, 3, 1]).unwrap();
            let w = t.constant(w0.clone());
            let wg = t.mul(g, w).unwrap();
            t.sum(wg).unwrap()
        });
    }

    #[test]
    fn grad_cross_entropy() {
        let mut rng = ChaCha8Rng::seed_from_u64(27);
        check_grad(&randn(&mut rng, vec![3, 7]), |t, x| {
            let ce = t.cross_entropy(x, &[1, 0, 6]).unwrap();
            let s = t.sum(ce).unwrap();
            t.scale(s, 1.0 / 3.0).unwrap()
        });
    }

    #[test]
    fn grad_concat_and_add_rows_at() {
        let mut rng = ChaCha8Rng::seed_from_u64(28);
        check_grad(&randn(&mut rng, vec![3, 4]), |t, x| {
            let left = t.slice_cols(x, 0, 2).unwrap();
            let right = t.slice_cols(x, 2, 2).unwrap();
            let cat = t.concat_cols(&[right, left]).unwrap();
            t.sum(cat).unwrap()
        });
        let base0 = randn(&mut rng, vec![5, 3]);
        check_grad(&randn(&mut rng, vec![2, 3]), |t, x| {
            let base = t.constant(base0.clone());
            let v = t.add_rows_at(base, x, 1).unwrap();
            let y = t.gelu(v).unwrap();
            t.sum(y).unwrap()
        });
        check_grad(&randn(&mut rng, vec![5, 3]), |t, x| {
            let delta0 = t.constant(Tensor::matrix(2, 3, vec![0.3; 6]).unwrap());
            let v = t.add_rows_at(x, delta0, 2).unwrap();
            let y = t.gelu(v).unwrap();
            t.sum(y).unwrap()
        });
    }
}
