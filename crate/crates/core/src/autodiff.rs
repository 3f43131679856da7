//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Tape`] records every operation in execution order, which is already a
//! topological order. [`Tape::backward`] walks the records once in reverse and
//! accumulates vector-Jacobian products into each input.

use std::collections::HashMap;
use std::sync::Arc;

use crate::error::{GmaError, Result};
use crate::fft;
use crate::params::{ParamId, ParamStore};
use crate::sketch::SketchSpec;
use crate::tensor::{axis_split, BinaryKind, Tensor};

/// Guard inside the signed square root derivative, `1 / (2 sqrt(|x| + eps))`.
pub const SIGNED_SQRT_EPS: f64 = 1e-8;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Elementwise operator selector for [`Tape::elementwise`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Elementwise {
    Add,
    Mul,
    Tanh,
    Sigmoid,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param,
    MatMul(Var, Var),
    Binary(BinaryKind, Var, Var),
    Tanh(Var),
    Sigmoid(Var),
    Scale(Var, f64),
    Softmax(Var, usize),
    SignedSqrt(Var),
    L2Normalize(Var),
    Reshape(Var),
    Concat(Vec<Var>),
    SelectRows(Var, Vec<usize>),
    Sum(Var),
    CountSketch(Var, Arc<SketchSpec>),
    CircularConvolve(Var, Var),
    CrossEntropy { logits: Var, target: usize, probs: Tensor },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Operation record for one forward pass.
///
/// A tape optionally borrows a [`ParamStore`]; [`Tape::param`] binds a
/// parameter once and returns the same [`Var`] on later calls.
#[derive(Debug, Default)]
pub struct Tape<'p> {
    nodes: Vec<Node>,
    store: Option<&'p ParamStore>,
    bound: HashMap<ParamId, Var>,
}

impl<'p> Tape<'p> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            store: None,
            bound: HashMap::new(),
        }
    }

    pub fn with_params(store: &'p ParamStore) -> Self {
        Tape {
            nodes: Vec::new(),
            store: Some(store),
            bound: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn dims(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.dims()
    }

    fn push(&mut self, value: Tensor, op: Op, name: &'static str) -> Result<Var> {
        if !value.is_finite() {
            return Err(GmaError::Numeric(format!("{name} produced a non-finite value")));
        }
        self.nodes.push(Node { value, op });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Records a constant input. Gradients still flow to it and can be read
    /// from [`Gradients::wrt`].
    pub fn leaf(&mut self, value: Tensor) -> Result<Var> {
        self.push(value, Op::Leaf, "leaf")
    }

    pub fn param(&mut self, id: ParamId) -> Result<Var> {
        if let Some(&v) = self.bound.get(&id) {
            return Ok(v);
        }
        let store = self
            .store
            .ok_or_else(|| GmaError::contract("Tape::param", "tape has no parameter store"))?;
        let value = store.get(id).value.clone();
        let v = self.push(value, Op::Param, "param")?;
        self.bound.insert(id, v);
        Ok(v)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        self.push(out, Op::MatMul(a, b), "matmul")
    }

    pub fn elementwise(&mut self, kind: Elementwise, a: Var, b: Option<Var>) -> Result<Var> {
        match (kind, b) {
            (Elementwise::Add, Some(b)) => self.add(a, b),
            (Elementwise::Mul, Some(b)) => self.mul(a, b),
            (Elementwise::Tanh, None) => self.tanh(a),
            (Elementwise::Sigmoid, None) => self.sigmoid(a),
            (k, _) => Err(GmaError::contract(
                "elementwise",
                format!("{k:?} called with the wrong number of operands"),
            )),
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).add(self.value(b))?;
        self.push(out, Op::Binary(BinaryKind::Add, a, b), "add")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).mul(self.value(b))?;
        self.push(out, Op::Binary(BinaryKind::Mul, a, b), "mul")
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).tanh();
        self.push(out, Op::Tanh(a), "tanh")
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).sigmoid();
        self.push(out, Op::Sigmoid(a), "sigmoid")
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let out = self.value(a).scale(c);
        self.push(out, Op::Scale(a, c), "scale")
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let out = self.value(a).softmax(axis)?;
        self.push(out, Op::Softmax(a, axis), "softmax")
    }

    pub fn signed_sqrt(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).signed_sqrt();
        self.push(out, Op::SignedSqrt(a), "signed_sqrt")
    }

    /// Row-wise (last axis) L2 normalisation.
    pub fn l2_normalize(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).l2_normalize();
        self.push(out, Op::L2Normalize(a), "l2_normalize")
    }

    pub fn reshape(&mut self, a: Var, dims: &[usize]) -> Result<Var> {
        let out = self.value(a).reshape(dims)?;
        self.push(out, Op::Reshape(a), "reshape")
    }

    /// Concatenation along axis 0.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let values: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let out = Tensor::concat(&values)?;
        self.push(out, Op::Concat(parts.to_vec()), "concat")
    }

    pub fn select_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let out = self.value(a).select_rows(idx)?;
        self.push(out, Op::SelectRows(a, idx.to_vec()), "select_rows")
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(a).sum());
        self.push(out, Op::Sum(a), "sum")
    }

    pub fn count_sketch(&mut self, a: Var, spec: Arc<SketchSpec>) -> Result<Var> {
        let out = Tensor::vector(spec.project(self.value(a).data())?);
        self.push(out, Op::CountSketch(a, spec), "count_sketch")
    }

    pub fn circular_convolve(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.rank() != 1 || va.dims() != vb.dims() {
            return Err(GmaError::shape("circular_convolve", va.dims(), vb.dims()));
        }
        let out = Tensor::vector(fft::circular_convolve(va.data(), vb.data())?);
        self.push(out, Op::CircularConvolve(a, b), "circular_convolve")
    }

    /// `-log softmax(logits)[target]` as a scalar.
    pub fn cross_entropy(&mut self, logits: Var, target: usize) -> Result<Var> {
        let z = self.value(logits);
        if z.rank() != 1 {
            return Err(GmaError::contract("cross_entropy", format!("logits must be a vector, have {:?}", z.dims())));
        }
        if target >= z.len() {
            return Err(GmaError::contract(
                "cross_entropy",
                format!("target {target} out of range for {} classes", z.len()),
            ));
        }
        let probs = z.softmax(0)?;
        let max = z.max();
        let lse = max + z.data().iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        let loss = lse - z.data()[target];
        self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                target,
                probs,
            },
            "cross_entropy",
        )
    }

    // ---- composites -------------------------------------------------------

    /// Reshapes a vector `[n]` into a row `[1, n]`.
    pub fn as_row(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).len();
        self.reshape(a, &[1, n])
    }

    /// Flattens to a vector `[n]`.
    pub fn flatten(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).len();
        if self.dims(a) == [n] {
            return Ok(a);
        }
        self.reshape(a, &[n])
    }

    /// `x W + b` for `x: [M, in]`, `W: [in, out]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => self.add(y, b),
            None => Ok(y),
        }
    }

    /// `v W` for a vector `v: [in]`, returning `[out]`.
    pub fn vec_mat(&mut self, v: Var, w: Var) -> Result<Var> {
        let r = self.as_row(v)?;
        let y = self.matmul(r, w)?;
        self.flatten(y)
    }

    /// `sum_m weights[m] * rows[m, :]` for `weights: [M]`, `rows: [M, C]`.
    pub fn weighted_sum(&mut self, weights: Var, rows: Var) -> Result<Var> {
        self.vec_mat(weights, rows)
    }

    /// Mean over axis 0 of `rows: [M, C]`.
    pub fn mean_rows(&mut self, rows: Var) -> Result<Var> {
        let m = self.dims(rows)[0];
        let w = self.leaf(Tensor::full(&[m], 1.0 / m as f64))?;
        self.weighted_sum(w, rows)
    }

    /// Count-sketches both inputs and convolves the sketches.
    pub fn mcb_pool(&mut self, x: Var, y: Var, specs: (Arc<SketchSpec>, Arc<SketchSpec>)) -> Result<Var> {
        if specs.0.sketch_dim() != specs.1.sketch_dim() {
            return Err(GmaError::shape(
                "mcb_pool",
                &[specs.0.sketch_dim()],
                &[specs.1.sketch_dim()],
            ));
        }
        let sx = self.count_sketch(x, specs.0)?;
        let sy = self.count_sketch(y, specs.1)?;
        self.circular_convolve(sx, sy)
    }

    // ---- reverse pass -----------------------------------------------------

    /// Back-propagates from a single-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(GmaError::contract(
                "backward",
                format!("loss must be scalar, have dims {:?}", lv.dims()),
            ));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::ones(lv.dims()));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf | Op::Param => {}
                Op::MatMul(a, b) => {
                    let (va, vb) = (self.value(*a), self.value(*b));
                    let ga = g.matmul_nt(vb)?;
                    let gb = va.matmul_tn(&g)?;
                    accumulate(&mut grads, *a, ga)?;
                    accumulate(&mut grads, *b, gb)?;
                }
                Op::Binary(kind, a, b) => {
                    for (x, other) in [(*a, *b), (*b, *a)] {
                        let contrib = match kind {
                            BinaryKind::Add => g.clone(),
                            BinaryKind::Mul => g.mul(self.value(other))?,
                        };
                        let reduced = reduce_to(&contrib, self.value(x).dims());
                        accumulate(&mut grads, x, reduced)?;
                    }
                }
                Op::Tanh(a) => {
                    let y = &node.value;
                    let ga = zip_map(&g, y, |g, y| g * (1.0 - y * y));
                    accumulate(&mut grads, *a, ga)?;
                }
                Op::Sigmoid(a) => {
                    let y = &node.value;
                    let ga = zip_map(&g, y, |g, y| g * y * (1.0 - y));
                    accumulate(&mut grads, *a, ga)?;
                }
                Op::Scale(a, c) => accumulate(&mut grads, *a, g.scale(*c))?,
                Op::Softmax(a, axis) => {
                    let ga = softmax_backward(&node.value, &g, *axis)?;
                    accumulate(&mut grads, *a, ga)?;
                }
                Op::SignedSqrt(a) => {
                    let x = self.value(*a);
                    let ga = zip_map(&g, x, |g, x| g / (2.0 * (x.abs() + SIGNED_SQRT_EPS).sqrt()));
                    accumulate(&mut grads, *a, ga)?;
                }
                Op::L2Normalize(a) => {
                    let ga = l2_backward(self.value(*a), &g);
                    accumulate(&mut grads, *a, ga)?;
                }
                Op::Reshape(a) => {
                    let ga = g.reshape(self.value(*a).dims())?;
                    accumulate(&mut grads, *a, ga)?;
                }
                Op::Concat(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let pv = self.value(p);
                        let n = pv.len();
                        let piece = Tensor::new(pv.dims().to_vec(), g.data()[offset..offset + n].to_vec())?;
                        offset += n;
                        accumulate(&mut grads, p, piece)?;
                    }
                }
                Op::SelectRows(a, idx) => {
                    let src = self.value(*a);
                    let width = src.len() / src.dims()[0];
                    let mut ga = Tensor::zeros(src.dims());
                    for (k, &r) in idx.iter().enumerate() {
                        let dst = &mut ga.data_mut()[r * width..(r + 1) * width];
                        for (d, s) in dst.iter_mut().zip(&g.data()[k * width..(k + 1) * width]) {
                            *d += s;
                        }
                    }
                    accumulate(&mut grads, *a, ga)?;
                }
                Op::Sum(a) => {
                    let s = g.data()[0];
                    accumulate(&mut grads, *a, Tensor::full(self.value(*a).dims(), s))?;
                }
                Op::CountSketch(a, spec) => {
                    let ga = Tensor::vector(spec.project_adjoint(g.data()));
                    accumulate(&mut grads, *a, ga)?;
                }
                Op::CircularConvolve(a, b) => {
                    let ga = fft::circular_correlate(g.data(), self.value(*b).data())?;
                    let gb = fft::circular_correlate(g.data(), self.value(*a).data())?;
                    accumulate(&mut grads, *a, Tensor::vector(ga))?;
                    accumulate(&mut grads, *b, Tensor::vector(gb))?;
                }
                Op::CrossEntropy {
                    logits,
                    target,
                    probs,
                } => {
                    let s = g.data()[0];
                    let mut gl = probs.scale(s);
                    gl.data_mut()[*target] -= s;
                    accumulate(&mut grads, *logits, gl)?;
                }
            }
            grads[i] = Some(g);
        }

        let params = self.bound.iter().map(|(&id, &v)| (id, v)).collect();
        Ok(Gradients { grads, params })
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, contrib: Tensor) -> Result<()> {
    match &mut grads[v.0] {
        Some(existing) => {
            if existing.dims() != contrib.dims() {
                return Err(GmaError::shape("backward", existing.dims(), contrib.dims()));
            }
            for (e, c) in existing.data_mut().iter_mut().zip(contrib.data()) {
                *e += c;
            }
        }
        slot @ None => *slot = Some(contrib),
    }
    Ok(())
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.dims().to_vec(), data).expect("zip_map of equal shapes")
}

/// Sums a broadcast gradient back down to `dims` (a trailing suffix).
fn reduce_to(g: &Tensor, dims: &[usize]) -> Tensor {
    if g.dims() == dims {
        return g.clone();
    }
    let n: usize = dims.iter().product();
    let mut out = vec![0.0; n];
    for (i, v) in g.data().iter().enumerate() {
        out[i % n] += v;
    }
    Tensor::new(dims.to_vec(), out).expect("reduce_to target dims")
}

fn softmax_backward(y: &Tensor, g: &Tensor, axis: usize) -> Result<Tensor> {
    let (outer, len, inner) = axis_split(y.dims(), axis, "softmax")?;
    let mut out = vec![0.0; y.len()];
    let (yd, gd) = (y.data(), g.data());
    for o in 0..outer {
        for i in 0..inner {
            let idx = |k: usize| (o * len + k) * inner + i;
            let dot: f64 = (0..len).map(|k| yd[idx(k)] * gd[idx(k)]).sum();
            for k in 0..len {
                out[idx(k)] = yd[idx(k)] * (gd[idx(k)] - dot);
            }
        }
    }
    Tensor::new(y.dims().to_vec(), out)
}

fn l2_backward(x: &Tensor, g: &Tensor) -> Tensor {
    let cols = x.cols();
    let mut out = vec![0.0; x.len()];
    for ((xr, gr), or) in x
        .data()
        .chunks(cols)
        .zip(g.data().chunks(cols))
        .zip(out.chunks_mut(cols))
    {
        let n = xr.iter().map(|v| v * v).sum::<f64>().sqrt();
        let s = n + crate::tensor::L2_EPS;
        let gx: f64 = xr.iter().zip(gr).map(|(a, b)| a * b).sum();
        let coef = if n > 0.0 { gx / (s * s * n) } else { 0.0 };
        for ((o, &xv), &gv) in or.iter_mut().zip(xr).zip(gr) {
            *o = gv / s - xv * coef;
        }
    }
    Tensor::new(x.dims().to_vec(), out).expect("l2 backward dims")
}

/// Result of [`Tape::backward`].
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: Vec<(ParamId, Var)>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`, or `None` when the loss does
    /// not depend on it.
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params
            .iter()
            .find(|(p, _)| *p == id)
            .and_then(|(_, v)| self.wrt(*v))
    }

    /// Adds every bound parameter's gradient into its `grad` slot. Parameters
    /// in ascending id order, so accumulation order is fixed.
    pub fn accumulate_into(&self, store: &mut ParamStore) -> Result<()> {
        let mut params = self.params.clone();
        params.sort();
        for (id, v) in params {
            if let Some(g) = self.wrt(v) {
                store.accumulate_grad(id, g)?;
            }
        }
        Ok(())
    }
}
