//! Reverse-mode differentiation over a linear tape.
//!
//! Every operation appends a node holding its output value and the indices
//! of its operands, so nodes are stored in topological order by construction.
//! [`Tape::backward`] walks the nodes once, from the loss down to index zero,
//! and returns the gradient of every named parameter leaf.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};

use super::{kl_raw, matmul, softmax_masked, Tensor, PROB_EPS};
use crate::error::{Error, Result};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var {
    idx: usize,
    tape: u64,
}

/// Operation kinds, used to name backward rules (e.g. for fault injection).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    MatMul,
    Transpose,
    Add,
    Sub,
    AddRow,
    Mul,
    Scale,
    Tanh,
    Sigmoid,
    Relu,
    Softmax,
    Threshold,
    ConcatRows,
    ConcatCols,
    SliceRows,
    SliceCols,
    GatherRows,
    GatherCols,
    MeanRows,
    Sum,
    Reshape,
    UnitSum,
    Kl,
    Nll,
    BceWithLogits,
}

impl OpKind {
    pub fn parse(name: &str) -> Option<OpKind> {
        use OpKind::*;
        let all = [
            MatMul, Transpose, Add, Sub, AddRow, Mul, Scale, Tanh, Sigmoid, Relu, Softmax,
            Threshold, ConcatRows, ConcatCols, SliceRows, SliceCols, GatherRows, GatherCols,
            MeanRows, Sum, Reshape, UnitSum, Kl, Nll, BceWithLogits,
        ];
        all.into_iter()
            .find(|k| format!("{k:?}").eq_ignore_ascii_case(name))
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    Transpose(usize),
    Add(usize, usize),
    Sub(usize, usize),
    AddRow(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    Tanh(usize),
    Sigmoid(usize),
    Relu(usize),
    Softmax(usize),
    Threshold(usize, Vec<bool>),
    ConcatRows(Vec<usize>),
    ConcatCols(Vec<usize>),
    SliceRows(usize, usize),
    SliceCols(usize, usize),
    GatherRows(usize, Vec<usize>),
    GatherCols(usize, Vec<usize>),
    MeanRows(usize),
    Sum(usize),
    Reshape(usize),
    UnitSum(usize),
    Kl(usize, usize),
    Nll(usize, usize),
    BceWithLogits(usize, Vec<f64>),
}

impl Op {
    fn kind(&self) -> Option<OpKind> {
        Some(match self {
            Op::Leaf => return None,
            Op::MatMul(..) => OpKind::MatMul,
            Op::Transpose(..) => OpKind::Transpose,
            Op::Add(..) => OpKind::Add,
            Op::Sub(..) => OpKind::Sub,
            Op::AddRow(..) => OpKind::AddRow,
            Op::Mul(..) => OpKind::Mul,
            Op::Scale(..) => OpKind::Scale,
            Op::Tanh(..) => OpKind::Tanh,
            Op::Sigmoid(..) => OpKind::Sigmoid,
            Op::Relu(..) => OpKind::Relu,
            Op::Softmax(..) => OpKind::Softmax,
            Op::Threshold(..) => OpKind::Threshold,
            Op::ConcatRows(..) => OpKind::ConcatRows,
            Op::ConcatCols(..) => OpKind::ConcatCols,
            Op::SliceRows(..) => OpKind::SliceRows,
            Op::SliceCols(..) => OpKind::SliceCols,
            Op::GatherRows(..) => OpKind::GatherRows,
            Op::GatherCols(..) => OpKind::GatherCols,
            Op::MeanRows(..) => OpKind::MeanRows,
            Op::Sum(..) => OpKind::Sum,
            Op::Reshape(..) => OpKind::Reshape,
            Op::UnitSum(..) => OpKind::UnitSum,
            Op::Kl(..) => OpKind::Kl,
            Op::Nll(..) => OpKind::Nll,
            Op::BceWithLogits(..) => OpKind::BceWithLogits,
        })
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Recording of a forward computation. Single-threaded; build one per example.
#[derive(Debug)]
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
    params: Vec<(String, usize)>,
    sign_flip: Option<OpKind>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            params: Vec::new(),
            sign_flip: None,
        }
    }

    /// Negates the backward rule of every `kind` node. Test fixture for
    /// demonstrating that gradient checking catches a broken rule.
    pub fn inject_sign_flip(&mut self, kind: OpKind) {
        self.sign_flip = Some(kind);
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn check(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.idx >= self.nodes.len() {
            return Err(Error::Usage("variable is not recorded on this tape".into()));
        }
        Ok(v.idx)
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[usize]) -> Var {
        let requires_grad = inputs.iter().any(|&i| self.nodes[i].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            idx: self.nodes.len() - 1,
            tape: self.id,
        }
    }

    fn val(&self, i: usize) -> &Tensor {
        &self.nodes[i].value
    }

    pub fn value(&self, v: Var) -> &Tensor {
        assert_eq!(v.tape, self.id, "variable belongs to another tape");
        &self.nodes[v.idx].value
    }

    /// A leaf that does not receive gradients.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var {
            idx: self.nodes.len() - 1,
            tape: self.id,
        }
    }

    /// A named leaf whose gradient is reported by [`Tape::backward`].
    pub fn param(&mut self, name: &str, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            requires_grad: true,
        });
        let idx = self.nodes.len() - 1;
        self.params.push((name.to_string(), idx));
        Var { idx, tape: self.id }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let out = matmul(self.val(ia), self.val(ib))?;
        Ok(self.push(out, Op::MatMul(ia, ib), &[ia, ib]))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        let out = self.val(ia).transpose()?;
        Ok(self.push(out, Op::Transpose(ia), &[ia]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let out = self.val(ia).zip_map(self.val(ib), "add", |x, y| x + y)?;
        Ok(self.push(out, Op::Add(ia, ib), &[ia, ib]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let out = self.val(ia).zip_map(self.val(ib), "sub", |x, y| x - y)?;
        Ok(self.push(out, Op::Sub(ia, ib), &[ia, ib]))
    }

    /// Adds a `1 x n` row vector to every row of an `m x n` matrix.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (ix, ir) = (self.check(x)?, self.check(row)?);
        let (xv, rv) = (self.val(ix), self.val(ir));
        let (_, n) = xv.dims2()?;
        if rv.shape() != [1, n] {
            return Err(Error::shape("add_row", xv.shape(), rv.shape()));
        }
        let mut data = xv.data().to_vec();
        for chunk in data.chunks_mut(n) {
            for (d, b) in chunk.iter_mut().zip(rv.data()) {
                *d += b;
            }
        }
        let out = Tensor::from_parts(xv.shape().to_vec(), data);
        Ok(self.push(out, Op::AddRow(ix, ir), &[ix, ir]))
    }

    /// Element-wise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let out = self.val(ia).zip_map(self.val(ib), "mul", |x, y| x * y)?;
        Ok(self.push(out, Op::Mul(ia, ib), &[ia, ib]))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Result<Var> {
        let ia = self.check(a)?;
        let out = self.val(ia).map(|x| k * x);
        Ok(self.push(out, Op::Scale(ia, k), &[ia]))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        let out = self.val(ia).map(f64::tanh);
        Ok(self.push(out, Op::Tanh(ia), &[ia]))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        let out = self.val(ia).map(sigmoid);
        Ok(self.push(out, Op::Sigmoid(ia), &[ia]))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        let out = self.val(ia).map(|x| x.max(0.0));
        Ok(self.push(out, Op::Relu(ia), &[ia]))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        let out = softmax_masked(self.val(ia), None);
        Ok(self.push(out, Op::Softmax(ia), &[ia]))
    }

    /// Softmax over the last axis restricted to `keep`; other entries are 0.
    pub fn softmax_masked(&mut self, a: Var, keep: &[bool]) -> Result<Var> {
        let ia = self.check(a)?;
        if keep.len() != self.val(ia).len() {
            return Err(Error::shape("softmax_masked", self.val(ia).shape(), &[keep.len()]));
        }
        let out = softmax_masked(self.val(ia), Some(keep));
        // The backward rule only needs the output, so the mask is not stored.
        Ok(self.push(out, Op::Softmax(ia), &[ia]))
    }

    /// Keeps entries `>= tau` and zeroes the rest. The indicator is treated
    /// as a constant, so gradients pass only through kept entries.
    pub fn threshold(&mut self, a: Var, tau: f64) -> Result<(Var, Vec<bool>)> {
        let ia = self.check(a)?;
        let keep: Vec<bool> = self.val(ia).data().iter().map(|&x| x - tau >= 0.0).collect();
        let data = self
            .val(ia)
            .data()
            .iter()
            .zip(&keep)
            .map(|(&x, &k)| if k { x } else { 0.0 })
            .collect();
        let out = Tensor::from_parts(self.val(ia).shape().to_vec(), data);
        Ok((self.push(out, Op::Threshold(ia, keep.clone()), &[ia]), keep))
    }

    /// Stacks matrices with equal column counts vertically.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let idx = parts.iter().map(|&p| self.check(p)).collect::<Result<Vec<_>>>()?;
        let first = idx.first().ok_or_else(|| Error::Usage("concat_rows of nothing".into()))?;
        let (_, n) = self.val(*first).dims2()?;
        let mut rows = 0;
        let mut data = Vec::new();
        for &i in &idx {
            let (m, ni) = self.val(i).dims2()?;
            if ni != n {
                return Err(Error::shape("concat_rows", self.val(*first).shape(), self.val(i).shape()));
            }
            rows += m;
            data.extend_from_slice(self.val(i).data());
        }
        let out = Tensor::from_parts(vec![rows, n], data);
        Ok(self.push(out, Op::ConcatRows(idx.clone()), &idx))
    }

    /// Joins matrices with equal row counts side by side.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let idx = parts.iter().map(|&p| self.check(p)).collect::<Result<Vec<_>>>()?;
        let first = idx.first().ok_or_else(|| Error::Usage("concat_cols of nothing".into()))?;
        let (m, _) = self.val(*first).dims2()?;
        let mut widths = Vec::with_capacity(idx.len());
        for &i in &idx {
            let (mi, ni) = self.val(i).dims2()?;
            if mi != m {
                return Err(Error::shape("concat_cols", self.val(*first).shape(), self.val(i).shape()));
            }
            widths.push(ni);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(m * total);
        for r in 0..m {
            for (&i, &w) in idx.iter().zip(&widths) {
                data.extend_from_slice(&self.val(i).data()[r * w..(r + 1) * w]);
            }
        }
        let out = Tensor::from_parts(vec![m, total], data);
        Ok(self.push(out, Op::ConcatCols(idx.clone()), &idx))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let ia = self.check(a)?;
        let (m, n) = self.val(ia).dims2()?;
        if len == 0 || start + len > m {
            return Err(Error::shape("slice_rows", self.val(ia).shape(), &[start, len]));
        }
        let data = self.val(ia).data()[start * n..(start + len) * n].to_vec();
        let out = Tensor::from_parts(vec![len, n], data);
        Ok(self.push(out, Op::SliceRows(ia, start), &[ia]))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let ia = self.check(a)?;
        let (m, n) = self.val(ia).dims2()?;
        if len == 0 || start + len > n {
            return Err(Error::shape("slice_cols", self.val(ia).shape(), &[start, len]));
        }
        let src = self.val(ia).data();
        let mut data = Vec::with_capacity(m * len);
        for r in 0..m {
            data.extend_from_slice(&src[r * n + start..r * n + start + len]);
        }
        let out = Tensor::from_parts(vec![m, len], data);
        Ok(self.push(out, Op::SliceCols(ia, start), &[ia]))
    }

    /// Output row `r` is input row `rows[r]`.
    pub fn gather_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var> {
        let ia = self.check(a)?;
        let (m, n) = self.val(ia).dims2()?;
        if rows.is_empty() || rows.iter().any(|&r| r >= m) {
            return Err(Error::shape("gather_rows", self.val(ia).shape(), &[rows.len()]));
        }
        let src = self.val(ia).data();
        let mut data = Vec::with_capacity(rows.len() * n);
        for &r in rows {
            data.extend_from_slice(&src[r * n..(r + 1) * n]);
        }
        let out = Tensor::from_parts(vec![rows.len(), n], data);
        Ok(self.push(out, Op::GatherRows(ia, rows.to_vec()), &[ia]))
    }

    /// Output column `c` is input column `cols[c]`.
    pub fn gather_cols(&mut self, a: Var, cols: &[usize]) -> Result<Var> {
        let ia = self.check(a)?;
        let (m, n) = self.val(ia).dims2()?;
        if cols.is_empty() || cols.iter().any(|&c| c >= n) {
            return Err(Error::shape("gather_cols", self.val(ia).shape(), &[cols.len()]));
        }
        let src = self.val(ia).data();
        let mut data = Vec::with_capacity(m * cols.len());
        for r in 0..m {
            data.extend(cols.iter().map(|&c| src[r * n + c]));
        }
        let out = Tensor::from_parts(vec![m, cols.len()], data);
        Ok(self.push(out, Op::GatherCols(ia, cols.to_vec()), &[ia]))
    }

    /// Mean over rows: `m x n -> 1 x n`.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        let (m, n) = self.val(ia).dims2()?;
        let mut data = vec![0.0; n];
        for row in self.val(ia).data().chunks(n) {
            for (d, x) in data.iter_mut().zip(row) {
                *d += x;
            }
        }
        data.iter_mut().for_each(|d| *d /= m as f64);
        let out = Tensor::from_parts(vec![1, n], data);
        Ok(self.push(out, Op::MeanRows(ia), &[ia]))
    }

    /// Sum of all entries, as a scalar.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        let out = Tensor::scalar(self.val(ia).sum());
        Ok(self.push(out, Op::Sum(ia), &[ia]))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let ia = self.check(a)?;
        let out = self.val(ia).clone().reshape(shape)?;
        Ok(self.push(out, Op::Reshape(ia), &[ia]))
    }

    /// Divides a non-negative tensor by its total so that it sums to one.
    pub fn unit_sum(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        let total = self.val(ia).sum();
        if !(total > 0.0) {
            return Err(Error::contract(format!("unit_sum of a tensor summing to {total}")));
        }
        let out = self.val(ia).map(|x| x / total);
        Ok(self.push(out, Op::UnitSum(ia), &[ia]))
    }

    /// `KL(p || q)` with both arguments clamped at [`PROB_EPS`].
    pub fn kl(&mut self, p: Var, q: Var) -> Result<Var> {
        let (ip, iq) = (self.check(p)?, self.check(q)?);
        if self.val(ip).len() != self.val(iq).len() {
            return Err(Error::shape("kl", self.val(ip).shape(), self.val(iq).shape()));
        }
        super::check_simplex(self.val(ip), "kl p")?;
        super::check_simplex(self.val(iq), "kl q")?;
        let out = Tensor::scalar(kl_raw(self.val(ip).data(), self.val(iq).data()));
        Ok(self.push(out, Op::Kl(ip, iq), &[ip, iq]))
    }

    /// Jensen-Shannon divergence, differentiated through both KL terms and
    /// through the midpoint distribution.
    pub fn js(&mut self, p: Var, q: Var) -> Result<Var> {
        let pq = self.add(p, q)?;
        let m = self.scale(pq, 0.5)?;
        let kp = self.kl(p, m)?;
        let kq = self.kl(q, m)?;
        let both = self.add(kp, kq)?;
        self.scale(both, 0.5)
    }

    /// `-log p[target]` with `p` clamped at [`PROB_EPS`].
    pub fn nll(&mut self, p: Var, target: usize) -> Result<Var> {
        let ip = self.check(p)?;
        let pv = self.val(ip);
        if target >= pv.len() {
            return Err(Error::contract(format!(
                "class index {target} out of range for {} classes",
                pv.len()
            )));
        }
        let out = Tensor::scalar(-pv.data()[target].max(PROB_EPS).ln());
        Ok(self.push(out, Op::Nll(ip, target), &[ip]))
    }

    /// Mean binary cross-entropy of `sigmoid(z)` against `labels`.
    pub fn bce_with_logits(&mut self, z: Var, labels: &[f64]) -> Result<Var> {
        let iz = self.check(z)?;
        let zv = self.val(iz);
        if labels.len() != zv.len() {
            return Err(Error::shape("bce_with_logits", zv.shape(), &[labels.len()]));
        }
        let n = labels.len() as f64;
        let total: f64 = zv
            .data()
            .iter()
            .zip(labels)
            .map(|(&z, &y)| z.max(0.0) + (-z.abs()).exp().ln_1p() - y * z)
            .sum();
        let out = Tensor::scalar(total / n);
        Ok(self.push(out, Op::BceWithLogits(iz, labels.to_vec()), &[iz]))
    }

    /// Gradients of the scalar `loss` with respect to every named parameter
    /// on this tape. Parameters the loss does not depend on get zeros.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let il = self.check(loss)?;
        if self.nodes[il].value.len() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[il].value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..=il).map(|_| None).collect();
        grads[il] = Some(Tensor::ones(self.nodes[il].value.shape()));
        for i in (0..=il).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) || !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let flip = self.sign_flip.is_some() && node.op.kind() == self.sign_flip;
            for (j, mut contrib) in self.local_backward(i, &g)? {
                if !self.nodes[j].requires_grad {
                    continue;
                }
                if flip {
                    contrib.data_mut().iter_mut().for_each(|x| *x = -*x);
                }
                match &mut grads[j] {
                    Some(acc) => acc.add_assign(&contrib),
                    slot @ None => *slot = Some(contrib),
                }
            }
        }
        let mut map = BTreeMap::new();
        for (name, idx) in &self.params {
            let g = if *idx <= il { grads[*idx].take() } else { None };
            let g = g.unwrap_or_else(|| Tensor::zeros(self.nodes[*idx].value.shape()));
            match map.get_mut(name) {
                Some(acc) => Tensor::add_assign(acc, &g),
                None => {
                    map.insert(name.clone(), g);
                }
            }
        }
        Ok(Gradients(map))
    }

    fn local_backward(&self, i: usize, g: &Tensor) -> Result<Vec<(usize, Tensor)>> {
        let node = &self.nodes[i];
        let y = &node.value;
        let wants = |j: usize| self.nodes[j].requires_grad;
        let mut out = Vec::with_capacity(2);
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if wants(*a) {
                    out.push((*a, matmul(g, &self.val(*b).transpose()?)?));
                }
                if wants(*b) {
                    out.push((*b, matmul(&self.val(*a).transpose()?, g)?));
                }
            }
            Op::Transpose(a) => out.push((*a, g.transpose()?)),
            Op::Add(a, b) => {
                out.push((*a, g.clone()));
                out.push((*b, g.clone()));
            }
            Op::Sub(a, b) => {
                out.push((*a, g.clone()));
                out.push((*b, g.map(|x| -x)));
            }
            Op::AddRow(x, r) => {
                out.push((*x, g.clone()));
                if wants(*r) {
                    let n = g.last_dim();
                    let mut col = vec![0.0; n];
                    for row in g.data().chunks(n) {
                        for (c, v) in col.iter_mut().zip(row) {
                            *c += v;
                        }
                    }
                    out.push((*r, Tensor::from_parts(vec![1, n], col)));
                }
            }
            Op::Mul(a, b) => {
                if wants(*a) {
                    out.push((*a, g.zip_map(self.val(*b), "mul", |x, y| x * y)?));
                }
                if wants(*b) {
                    out.push((*b, g.zip_map(self.val(*a), "mul", |x, y| x * y)?));
                }
            }
            Op::Scale(a, k) => out.push((*a, g.map(|x| k * x))),
            Op::Tanh(a) => out.push((*a, g.zip_map(y, "tanh", |g, y| g * (1.0 - y * y))?)),
            Op::Sigmoid(a) => out.push((*a, g.zip_map(y, "sigmoid", |g, y| g * y * (1.0 - y))?)),
            Op::Relu(a) => {
                out.push((*a, g.zip_map(self.val(*a), "relu", |g, x| if x > 0.0 { g } else { 0.0 })?))
            }
            Op::Softmax(a) => {
                let n = y.last_dim();
                let mut dx = vec![0.0; y.len()];
                for ((ys, gs), ds) in y.data().chunks(n).zip(g.data().chunks(n)).zip(dx.chunks_mut(n)) {
                    let dot: f64 = ys.iter().zip(gs).map(|(a, b)| a * b).sum();
                    for ((d, &yv), &gv) in ds.iter_mut().zip(ys).zip(gs) {
                        *d = yv * (gv - dot);
                    }
                }
                out.push((*a, Tensor::from_parts(y.shape().to_vec(), dx)));
            }
            Op::Threshold(a, keep) => {
                let data = g.data().iter().zip(keep).map(|(&x, &k)| if k { x } else { 0.0 }).collect();
                out.push((*a, Tensor::from_parts(g.shape().to_vec(), data)));
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.val(p).len();
                    if wants(p) {
                        let data = g.data()[offset..offset + len].to_vec();
                        out.push((p, Tensor::from_parts(self.val(p).shape().to_vec(), data)));
                    }
                    offset += len;
                }
            }
            Op::ConcatCols(parts) => {
                let total = g.last_dim();
                let mut start = 0;
                for &p in parts {
                    let (m, w) = self.val(p).dims2()?;
                    if wants(p) {
                        let mut data = Vec::with_capacity(m * w);
                        for r in 0..m {
                            data.extend_from_slice(&g.data()[r * total + start..r * total + start + w]);
                        }
                        out.push((p, Tensor::from_parts(vec![m, w], data)));
                    }
                    start += w;
                }
            }
            Op::SliceRows(a, start) => {
                let src = self.val(*a);
                let n = src.last_dim();
                let mut data = vec![0.0; src.len()];
                data[start * n..start * n + g.len()].copy_from_slice(g.data());
                out.push((*a, Tensor::from_parts(src.shape().to_vec(), data)));
            }
            Op::SliceCols(a, start) => {
                let src = self.val(*a);
                let (m, n) = src.dims2()?;
                let w = g.last_dim();
                let mut data = vec![0.0; m * n];
                for r in 0..m {
                    data[r * n + start..r * n + start + w].copy_from_slice(&g.data()[r * w..(r + 1) * w]);
                }
                out.push((*a, Tensor::from_parts(vec![m, n], data)));
            }
            Op::GatherRows(a, rows) => {
                let src = self.val(*a);
                let n = src.last_dim();
                let mut data = vec![0.0; src.len()];
                for (k, &r) in rows.iter().enumerate() {
                    for c in 0..n {
                        data[r * n + c] += g.data()[k * n + c];
                    }
                }
                out.push((*a, Tensor::from_parts(src.shape().to_vec(), data)));
            }
            Op::GatherCols(a, cols) => {
                let src = self.val(*a);
                let (m, n) = src.dims2()?;
                let w = cols.len();
                let mut data = vec![0.0; m * n];
                for r in 0..m {
                    for (k, &c) in cols.iter().enumerate() {
                        data[r * n + c] += g.data()[r * w + k];
                    }
                }
                out.push((*a, Tensor::from_parts(vec![m, n], data)));
            }
            Op::MeanRows(a) => {
                let src = self.val(*a);
                let (m, _) = src.dims2()?;
                let mut data = Vec::with_capacity(src.len());
                for _ in 0..m {
                    data.extend(g.data().iter().map(|x| x / m as f64));
                }
                out.push((*a, Tensor::from_parts(src.shape().to_vec(), data)));
            }
            Op::Sum(a) => out.push((*a, Tensor::full(self.val(*a).shape(), g.item()))),
            Op::Reshape(a) => out.push((*a, g.clone().reshape(self.val(*a).shape())?)),
            Op::UnitSum(a) => {
                let total = self.val(*a).sum();
                let dot: f64 = g.data().iter().zip(y.data()).map(|(a, b)| a * b).sum();
                out.push((*a, g.map(|gv| (gv - dot) / total)));
            }
            Op::Kl(p, q) => {
                let gs = g.item();
                let (pv, qv) = (self.val(*p), self.val(*q));
                if wants(*p) {
                    let data = pv
                        .data()
                        .iter()
                        .zip(qv.data())
                        .map(|(&a, &b)| {
                            if a < PROB_EPS {
                                0.0
                            } else {
                                gs * ((a / b.max(PROB_EPS)).ln() + 1.0)
                            }
                        })
                        .collect();
                    out.push((*p, Tensor::from_parts(pv.shape().to_vec(), data)));
                }
                if wants(*q) {
                    let data = pv
                        .data()
                        .iter()
                        .zip(qv.data())
                        .map(|(&a, &b)| if b < PROB_EPS { 0.0 } else { -gs * a.max(PROB_EPS) / b })
                        .collect();
                    out.push((*q, Tensor::from_parts(qv.shape().to_vec(), data)));
                }
            }
            Op::Nll(p, target) => {
                let pv = self.val(*p);
                let mut data = vec![0.0; pv.len()];
                let pt = pv.data()[*target];
                if pt >= PROB_EPS {
                    data[*target] = -g.item() / pt;
                }
                out.push((*p, Tensor::from_parts(pv.shape().to_vec(), data)));
            }
            Op::BceWithLogits(z, labels) => {
                let zv = self.val(*z);
                let n = labels.len() as f64;
                let gs = g.item();
                let data = zv
                    .data()
                    .iter()
                    .zip(labels)
                    .map(|(&z, &y)| gs * (sigmoid(z) - y) / n)
                    .collect();
                out.push((*z, Tensor::from_parts(zv.shape().to_vec(), data)));
            }
        }
        Ok(out)
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Trainable tensors addressed by name, iterated in name order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Params(BTreeMap<String, Tensor>);

impl Params {
    pub fn new() -> Self {
        Params(BTreeMap::new())
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.0.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.0.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.0.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.0.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.0.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.0.keys().map(String::as_str)
    }

    /// Number of named tensors.
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.0.values().map(Tensor::len).sum()
    }

    /// Records every tensor as a named parameter leaf on `tape`.
    pub fn bind(&self, tape: &mut Tape) -> BTreeMap<String, Var> {
        self.0
            .iter()
            .map(|(name, t)| (name.clone(), tape.param(name, t.clone())))
            .collect()
    }
}

/// Gradients keyed by parameter name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Gradients(BTreeMap<String, Tensor>);

impl Gradients {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.0.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.0.iter()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Adds `other` entry-wise; names missing on either side are carried over.
    pub fn accumulate(&mut self, other: &Gradients) {
        for (name, g) in &other.0 {
            match self.0.get_mut(name) {
                Some(acc) => acc.add_assign(g),
                None => {
                    self.0.insert(name.clone(), g.clone());
                }
            }
        }
    }

    pub fn scale(&mut self, k: f64) {
        for g in self.0.values_mut() {
            g.data_mut().iter_mut().for_each(|x| *x *= k);
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.0
            .values()
            .flat_map(|g| g.data().iter())
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt()
    }
}
