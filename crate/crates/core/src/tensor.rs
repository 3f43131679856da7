//! Dense row-major `f64` tensors.
//!
//! `Tensor` is an immutable-by-convention value type: every operation returns a
//! new tensor, so tensors can be shared freely across threads for read-only
//! forward evaluation.

use std::fmt;

use crate::error::{GmaError, Result};

/// Dense row-major tensor of 64-bit floats.
///
/// A rank-0 tensor (empty `dims`) holds a single scalar.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    dims: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("dims", &self.dims)
            .field("data", &self.data)
            .finish()
    }
}

/// Elementwise binary operator kinds supporting trailing-dimension broadcast.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinaryKind {
    Add,
    Mul,
}

impl Tensor {
    /// Builds a tensor, checking that `data.len()` equals the product of `dims`
    /// and that every dimension is positive.
    pub fn new(dims: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if dims.iter().any(|&d| d == 0) {
            return Err(GmaError::contract(
                "Tensor::new",
                format!("dimensions must be positive, got {dims:?}"),
            ));
        }
        let expected: usize = dims.iter().product();
        if expected != data.len() {
            return Err(GmaError::shape("Tensor::new", &dims, &[data.len()]));
        }
        Ok(Tensor { dims, data })
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            dims: Vec::new(),
            data: vec![value],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        assert!(!data.is_empty(), "vector must be non-empty");
        Tensor {
            dims: vec![data.len()],
            data,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![rows, cols], data)
    }

    pub fn full(dims: &[usize], value: f64) -> Self {
        let n = dims.iter().product();
        Tensor {
            dims: dims.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn zeros(dims: &[usize]) -> Self {
        Tensor::full(dims, 0.0)
    }

    pub fn ones(dims: &[usize]) -> Self {
        Tensor::full(dims, 1.0)
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Tensor::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn rank(&self) -> usize {
        self.dims.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
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

    /// Value of a single-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.data.len() != 1 {
            return Err(GmaError::contract(
                "Tensor::item",
                format!("expected one element, have dims {:?}", self.dims),
            ));
        }
        Ok(self.data[0])
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Row `i` of a rank-2 tensor.
    pub fn row(&self, i: usize) -> &[f64] {
        let cols = self.dims[self.dims.len() - 1];
        &self.data[i * cols..(i + 1) * cols]
    }

    /// Number of rows when viewed as a matrix `[rows, last_dim]`.
    pub fn rows(&self) -> usize {
        match self.dims.last() {
            Some(&c) => self.data.len() / c,
            None => 1,
        }
    }

    pub fn cols(&self) -> usize {
        self.dims.last().copied().unwrap_or(1)
    }

    pub fn reshape(&self, dims: &[usize]) -> Result<Tensor> {
        let n: usize = dims.iter().product();
        if n != self.data.len() || dims.iter().any(|&d| d == 0) {
            return Err(GmaError::shape("reshape", &self.dims, dims));
        }
        Ok(Tensor {
            dims: dims.to_vec(),
            data: self.data.clone(),
        })
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            dims: self.dims.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn scale(&self, c: f64) -> Tensor {
        self.map(|v| v * c)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn min(&self) -> f64 {
        self.data.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn dot(&self, other: &Tensor) -> Result<f64> {
        if self.data.len() != other.data.len() {
            return Err(GmaError::shape("dot", &self.dims, &other.dims));
        }
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum())
    }

    /// Matrix product of two rank-2 tensors.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        if self.rank() != 2 || other.rank() != 2 || self.dims[1] != other.dims[0] {
            return Err(GmaError::shape("matmul", &self.dims, &other.dims));
        }
        let (m, k, n) = (self.dims[0], self.dims[1], other.dims[1]);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let out_row = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let a = self.data[i * k + p];
                if a == 0.0 {
                    continue;
                }
                let b_row = &other.data[p * n..(p + 1) * n];
                for (o, &b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Ok(Tensor {
            dims: vec![m, n],
            data: out,
        })
    }

    /// `self * other^T`; sums in the same order as `matmul`.
    pub fn matmul_nt(&self, other: &Tensor) -> Result<Tensor> {
        if self.rank() != 2 || other.rank() != 2 || self.dims[1] != other.dims[1] {
            return Err(GmaError::shape("matmul_nt", &self.dims, &other.dims));
        }
        self.matmul(&other.transpose()?)
    }

    /// `self^T * other` without materializing the transpose; sums in the
    /// same order as `matmul`.
    pub fn matmul_tn(&self, other: &Tensor) -> Result<Tensor> {
        if self.rank() != 2 || other.rank() != 2 || self.dims[0] != other.dims[0] {
            return Err(GmaError::shape("matmul_tn", &self.dims, &other.dims));
        }
        let (k, m, n) = (self.dims[0], self.dims[1], other.dims[1]);
        let mut out = vec![0.0; m * n];
        for p in 0..k {
            let b_row = &other.data[p * n..(p + 1) * n];
            for i in 0..m {
                let a = self.data[p * m + i];
                if a == 0.0 {
                    continue;
                }
                for (o, &b) in out[i * n..(i + 1) * n].iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Ok(Tensor {
            dims: vec![m, n],
            data: out,
        })
    }

    /// Transpose of a rank-2 tensor.
    pub fn transpose(&self) -> Result<Tensor> {
        if self.rank() != 2 {
            return Err(GmaError::contract(
                "transpose",
                format!("expected rank 2, have {:?}", self.dims),
            ));
        }
        let (r, c) = (self.dims[0], self.dims[1]);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Ok(Tensor {
            dims: vec![c, r],
            data: out,
        })
    }

    /// Elementwise binary op. The operand with fewer dimensions must match the
    /// trailing dimensions of the other and is repeated along the leading ones.
    pub fn binary(&self, other: &Tensor, kind: BinaryKind) -> Result<Tensor> {
        let (big, small, swapped) = if self.data.len() >= other.data.len() {
            (self, other, false)
        } else {
            (other, self, true)
        };
        if !is_trailing_suffix(&big.dims, &small.dims) {
            let (l, r) = if swapped { (small, big) } else { (big, small) };
            return Err(GmaError::shape("elementwise", &l.dims, &r.dims));
        }
        let n = small.data.len();
        let data = big
            .data
            .iter()
            .enumerate()
            .map(|(i, &b)| {
                let s = small.data[i % n];
                match kind {
                    BinaryKind::Add => b + s,
                    BinaryKind::Mul => b * s,
                }
            })
            .collect();
        Ok(Tensor {
            dims: big.dims.clone(),
            data,
        })
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, BinaryKind::Add)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, BinaryKind::Mul)
    }

    pub fn tanh(&self) -> Tensor {
        self.map(f64::tanh)
    }

    pub fn sigmoid(&self) -> Tensor {
        self.map(sigmoid)
    }

    /// Softmax along `axis`, computed with the maximum subtracted first.
    pub fn softmax(&self, axis: usize) -> Result<Tensor> {
        let (outer, len, inner) = axis_split(&self.dims, axis, "softmax")?;
        let mut out = self.data.clone();
        for o in 0..outer {
            for i in 0..inner {
                let idx = |k: usize| (o * len + k) * inner + i;
                let mut max = f64::NEG_INFINITY;
                for k in 0..len {
                    max = max.max(self.data[idx(k)]);
                }
                let mut total = 0.0;
                for k in 0..len {
                    let e = (self.data[idx(k)] - max).exp();
                    out[idx(k)] = e;
                    total += e;
                }
                for k in 0..len {
                    out[idx(k)] /= total;
                }
            }
        }
        Ok(Tensor {
            dims: self.dims.clone(),
            data: out,
        })
    }

    /// `sign(x) * sqrt(|x|)` elementwise.
    pub fn signed_sqrt(&self) -> Tensor {
        self.map(|v| v.signum() * v.abs().sqrt())
    }

    /// Divides each row (last axis) by its Euclidean norm plus [`L2_EPS`].
    pub fn l2_normalize(&self) -> Tensor {
        let cols = self.cols();
        let mut data = self.data.clone();
        for row in data.chunks_mut(cols) {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            for v in row.iter_mut() {
                *v /= n + L2_EPS;
            }
        }
        Tensor {
            dims: self.dims.clone(),
            data,
        }
    }

    /// Selects rows of a tensor viewed as `[rows, rest...]`.
    pub fn select_rows(&self, idx: &[usize]) -> Result<Tensor> {
        if self.rank() == 0 || idx.is_empty() {
            return Err(GmaError::contract("select_rows", "need rank >= 1 and indices"));
        }
        let rows = self.dims[0];
        let width = self.data.len() / rows;
        let mut data = Vec::with_capacity(idx.len() * width);
        for &i in idx {
            if i >= rows {
                return Err(GmaError::contract(
                    "select_rows",
                    format!("row {i} out of range for {rows} rows"),
                ));
            }
            data.extend_from_slice(&self.data[i * width..(i + 1) * width]);
        }
        let mut dims = self.dims.clone();
        dims[0] = idx.len();
        Ok(Tensor { dims, data })
    }

    /// Concatenates along axis 0; trailing dimensions must agree.
    pub fn concat(parts: &[&Tensor]) -> Result<Tensor> {
        let first = parts
            .first()
            .ok_or_else(|| GmaError::contract("concat", "no inputs"))?;
        if first.rank() == 0 {
            return Err(GmaError::contract("concat", "cannot concatenate scalars"));
        }
        let tail = &first.dims[1..];
        let mut rows = 0;
        let mut data = Vec::new();
        for p in parts {
            if p.rank() != first.rank() || &p.dims[1..] != tail {
                return Err(GmaError::shape("concat", &first.dims, &p.dims));
            }
            rows += p.dims[0];
            data.extend_from_slice(&p.data);
        }
        let mut dims = first.dims.clone();
        dims[0] = rows;
        Ok(Tensor { dims, data })
    }
}

/// Guard added to the norm in [`Tensor::l2_normalize`].
pub const L2_EPS: f64 = 1e-12;

pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn is_trailing_suffix(big: &[usize], small: &[usize]) -> bool {
    small.len() <= big.len() && big[big.len() - small.len()..] == *small
}

/// Splits `dims` around `axis` into (outer, axis length, inner) extents.
pub(crate) fn axis_split(dims: &[usize], axis: usize, op: &'static str) -> Result<(usize, usize, usize)> {
    if dims.is_empty() {
        return Ok((1, 1, 1));
    }
    if axis >= dims.len() {
        return Err(GmaError::contract(op, format!("axis {axis} invalid for dims {dims:?}")));
    }
    let outer = dims[..axis].iter().product();
    let inner = dims[axis + 1..].iter().product();
    Ok((outer, dims[axis], inner))
}
