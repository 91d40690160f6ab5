//! Dense f64 tensors, the kernels the model is built from, a reverse-mode
//! tape, a finite-difference gradient checker and the `TJT1` file format.

mod gradcheck;
mod io;
mod tape;

pub use gradcheck::{grad_check, GradCheckReport, GroupError, DEFAULT_GRADCHECK_EPS};
pub use io::{read_tensor, read_tensor_from, write_tensor, write_tensor_to, TJT1_MAGIC};
pub use tape::{Gradients, OpKind, Params, Tape, Var};
pub(crate) use tape::sigmoid;

use crate::error::{Error, Result};

/// Lower clamp applied to probabilities before taking logarithms.
pub const PROB_EPS: f64 = 1e-12;

/// Tolerance on `|sum - 1|` when checking that a vector lies on the simplex.
pub const SIMPLEX_TOL: f64 = 1e-9;

/// Dense row-major tensor of 64-bit floats.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.iter().any(|&e| e == 0) {
            return Err(Error::contract(format!(
                "tensor extents must be positive, got {shape:?}"
            )));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::contract(format!(
                "tensor of shape {shape:?} needs {expected} values, got {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    /// A `1 x n` row vector.
    pub fn row_vector(values: &[f64]) -> Self {
        Tensor {
            shape: vec![1, values.len()],
            data: values.to_vec(),
        }
    }

    /// Builds an `m x n` matrix from equally long rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let m = rows.len();
        let n = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != n) {
            return Err(Error::contract("ragged rows"));
        }
        Tensor::new(vec![m, n], rows.concat())
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Tensor::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    /// Rows and columns of a rank-2 tensor.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [m, n] => Ok((*m, *n)),
            _ => Err(Error::contract(format!(
                "expected a matrix, got shape {:?}",
                self.shape
            ))),
        }
    }

    /// Length of the last axis.
    pub fn last_dim(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.last_dim() + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let n = self.last_dim();
        &self.data[i * n..(i + 1) * n]
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        if shape.iter().product::<usize>() != self.data.len() || shape.contains(&0) {
            return Err(Error::shape("reshape", &self.shape, shape));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    /// Sub-tensor at index `i` of the leading axis.
    pub fn slab(&self, i: usize) -> Result<Tensor> {
        let Some((&lead, rest)) = self.shape.split_first() else {
            return Err(Error::contract("cannot take a slab of a scalar"));
        };
        if i >= lead {
            return Err(Error::contract(format!(
                "slab index {i} out of range for leading extent {lead}"
            )));
        }
        let size: usize = rest.iter().product();
        let shape = if rest.is_empty() { vec![1] } else { rest.to_vec() };
        Ok(Tensor {
            shape,
            data: self.data[i * size..(i + 1) * size].to_vec(),
        })
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::shape(op, &self.shape, &other.shape));
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn transpose(&self) -> Result<Tensor> {
        let (m, n) = self.dims2()?;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        Ok(Tensor {
            shape: vec![n, m],
            data: out,
        })
    }

    /// Index of the largest entry; ties resolve to the lowest index.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &x) in self.data.iter().enumerate() {
            if x > self.data[best] {
                best = i;
            }
        }
        best
    }

    pub(crate) fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Tensor {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor { shape, data }
    }
}

/// Matrix product of an `m x k` and a `k x n` matrix.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.dims2().map_err(|_| Error::shape("matmul", a.shape(), b.shape()))?;
    let (k2, n) = b.dims2().map_err(|_| Error::shape("matmul", a.shape(), b.shape()))?;
    if k != k2 {
        return Err(Error::shape("matmul", a.shape(), b.shape()));
    }
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a.data[i * k + p];
            if av == 0.0 {
                continue;
            }
            let b_row = &b.data[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
    Ok(Tensor::from_parts(vec![m, n], out))
}

/// Softmax along the last axis, computed with the slice maximum subtracted.
pub fn softmax(x: &Tensor) -> Tensor {
    softmax_masked(x, None)
}

/// Softmax along the last axis restricted to entries where `keep` is true;
/// masked entries get probability zero. A slice with every entry masked
/// falls back to the plain softmax over that slice.
pub fn softmax_masked(x: &Tensor, keep: Option<&[bool]>) -> Tensor {
    let n = x.last_dim();
    let mut out = vec![0.0; x.len()];
    for (r, (src, dst)) in x.data.chunks(n).zip(out.chunks_mut(n)).enumerate() {
        let mask = keep.map(|k| &k[r * n..(r + 1) * n]);
        let active = |j: usize| mask.map_or(true, |m| m[j]) ;
        let any_active = (0..n).any(active);
        let on = |j: usize| !any_active || active(j);
        let max = (0..n)
            .filter(|&j| on(j))
            .map(|j| src[j])
            .fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for j in 0..n {
            if on(j) {
                dst[j] = (src[j] - max).exp();
                total += dst[j];
            }
        }
        for v in dst.iter_mut() {
            *v /= total;
        }
    }
    Tensor::from_parts(x.shape.clone(), out)
}

/// Checks that `p` is non-negative and sums to one within [`SIMPLEX_TOL`].
pub fn check_simplex(p: &Tensor, what: &str) -> Result<()> {
    if p.data.iter().any(|&x| !(x >= 0.0)) {
        return Err(Error::contract(format!("{what} has negative or NaN entries")));
    }
    let s = p.sum();
    if (s - 1.0).abs() > SIMPLEX_TOL {
        return Err(Error::contract(format!("{what} sums to {s}, not 1")));
    }
    Ok(())
}

pub(crate) fn kl_raw(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .map(|(&pi, &qi)| {
            let pi = pi.max(PROB_EPS);
            let qi = qi.max(PROB_EPS);
            pi * (pi / qi).ln()
        })
        .sum()
}

/// Kullback-Leibler divergence `sum p log(p/q)` in nats, with both arguments
/// clamped below at [`PROB_EPS`].
pub fn kl_divergence(p: &Tensor, q: &Tensor) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::shape("kl_divergence", p.shape(), q.shape()));
    }
    check_simplex(p, "kl_divergence p")?;
    check_simplex(q, "kl_divergence q")?;
    Ok(kl_raw(&p.data, &q.data).max(0.0))
}

/// Jensen-Shannon divergence: mean KL of each argument to their midpoint.
pub fn js_divergence(p: &Tensor, q: &Tensor) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::shape("js_divergence", p.shape(), q.shape()));
    }
    check_simplex(p, "js_divergence p")?;
    check_simplex(q, "js_divergence q")?;
    let m: Vec<f64> = p.data.iter().zip(&q.data).map(|(a, b)| 0.5 * (a + b)).collect();
    Ok((0.5 * kl_raw(&p.data, &m) + 0.5 * kl_raw(&q.data, &m)).max(0.0))
}
