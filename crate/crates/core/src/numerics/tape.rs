//! Tape-based reverse-mode automatic differentiation.
//!
//! Every operation appends a node to the [`Tape`] holding its forward value
//! and whatever it needs for the backward sweep. Node ids are assigned in
//! creation order, so the tape is topologically sorted by construction and
//! [`Tape::backward`] is a single reverse scan.
//!
//! Axis conventions:
//! - "row" operations (`softmax_rows`, `l2_normalize_rows`, `layer_norm`,
//!   `add_row`) act on the last axis, viewing the tensor as `[len / c, c]`;
//! - "first-axis" operations (`gather_rows`, `concat_rows`, `scatter_add`)
//!   treat `shape[0]` as the row count, so a 1-D tensor is a column of scalars;
//! - `matmul`, `transpose`, `slice_cols`, `concat_cols` and `mean_rows`
//!   require 2-D inputs.

use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::scalar::Scalar;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

pub const LAYER_NORM_EPS: f64 = 1e-5;
const NORM_FLOOR: f64 = 1e-12;

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, T),
    Sum(Var),
    Mean(Var),
    Abs(Var),
    Gelu(Var),
    Softmax { x: Var, tau: T },
    LogSoftmax { x: Var, tau: T },
    Normalize { x: Var, norms: Vec<T> },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, rstd: Vec<T> },
    Reshape(Var),
    GatherRows { x: Var, idx: Vec<usize> },
    ConcatRows(Vec<Var>),
    SliceCols { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    MeanRows(Var),
    ScatterAdd { x: Var, idx: Vec<usize> },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    grad: Option<Vec<T>>,
}

/// Single-writer computation context.
#[derive(Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

fn row_geometry<T: Scalar>(t: &Tensor<T>) -> (usize, usize) {
    (t.rows(), t.cols())
}

fn first_axis<T: Scalar>(t: &Tensor<T>) -> (usize, usize) {
    let r = t.shape()[0];
    (r, t.len() / r)
}

fn require_2d<T: Scalar>(op: &'static str, t: &Tensor<T>) -> Result<(usize, usize)> {
    match *t.shape() {
        [r, c] => Ok((r, c)),
        _ => Err(Error::dim(op, t.shape(), &[0, 0])),
    }
}

fn gelu_parts<T: Scalar>(x: T) -> (T, T) {
    let c = T::of((2.0 / std::f64::consts::PI).sqrt());
    let a = T::of(0.044715);
    let half = T::of(0.5);
    let inner = c * (x + a * x * x * x);
    let t = inner.tanh();
    let y = half * x * (T::one() + t);
    let dy = half * (T::one() + t)
        + half * x * (T::one() - t * t) * c * (T::one() + T::of(3.0) * a * x * x);
    (y, dy)
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    pub fn scalar_value(&self, v: Var) -> T {
        self.nodes[v.0].value.item()
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].grad.as_deref()
    }

    /// Gradient of a leaf, zeros when no backward pass reached it.
    pub fn grad_or_zero(&self, v: Var) -> Vec<T> {
        self.grad(v)
            .map(<[T]>::to_vec)
            .unwrap_or_else(|| vec![T::zero(); self.value(v).len()])
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    // ---- linear algebra -------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (m, k) = require_2d("matmul", av)?;
        let (k2, n) = require_2d("matmul", bv)?;
        if k != k2 {
            return Err(Error::dim("matmul", av.shape(), bv.shape()));
        }
        let out = matmul_raw(av.data(), bv.data(), m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        let (m, n) = require_2d("transpose", av)?;
        let out = transpose_raw(av.data(), m, n);
        let rg = self.rg(a);
        Ok(self.push(Tensor::new(vec![n, m], out)?, Op::Transpose(a), rg))
    }

    // ---- elementwise ------------------------------------------------------

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip_with(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        self.same_shape(op, a, b)?;
        let (av, bv) = (self.value(a), self.value(b));
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(av.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_with("add", a, b, |x, y| x + y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_with("sub", a, b, |x, y| x - y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_with("mul", a, b, |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Mul(a, b), rg))
    }

    /// Adds a length-`c` vector to every last-axis row of `a`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let c = av.cols();
        if bv.shape() != [c] {
            return Err(Error::dim("add_row", av.shape(), bv.shape()));
        }
        let bd = bv.data();
        let data = av
            .data()
            .chunks(c)
            .flat_map(|row| row.iter().zip(bd).map(|(&x, &y)| x + y))
            .collect();
        let t = Tensor::new(av.shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::AddRow(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let av = self.value(a);
        let data = av.data().iter().map(|&x| x * c).collect();
        let t = Tensor::new(av.shape().to_vec(), data).expect("shape preserved");
        let rg = self.rg(a);
        self.push(t, Op::Scale(a, c), rg)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let data = av.data().iter().map(|x| x.abs()).collect();
        let t = Tensor::new(av.shape().to_vec(), data).expect("shape preserved");
        let rg = self.rg(a);
        self.push(t, Op::Abs(a), rg)
    }

    /// Tanh approximation of GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let data = av.data().iter().map(|&x| gelu_parts(x).0).collect();
        let t = Tensor::new(av.shape().to_vec(), data).expect("shape preserved");
        let rg = self.rg(a);
        self.push(t, Op::Gelu(a), rg)
    }

    // ---- reductions -------------------------------------------------------

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().copied().sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let s: T = av.data().iter().copied().sum();
        let m = s / T::of(av.len() as f64);
        let rg = self.rg(a);
        self.push(Tensor::scalar(m), Op::Mean(a), rg)
    }

    /// Column means of a 2-D tensor.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        let (r, c) = require_2d("mean_rows", av)?;
        let mut out = vec![T::zero(); c];
        for row in av.data().chunks(c) {
            for (o, &x) in out.iter_mut().zip(row) {
                *o = *o + x;
            }
        }
        let inv = T::one() / T::of(r as f64);
        out.iter_mut().for_each(|o| *o = *o * inv);
        let rg = self.rg(a);
        Ok(self.push(Tensor::vector(out), Op::MeanRows(a), rg))
    }

    // ---- normalisation ----------------------------------------------------

    /// `softmax(x / tau)` along the last axis, max-subtracted.
    pub fn softmax_rows(&mut self, x: Var, tau: T) -> Result<Var> {
        check_tau(tau)?;
        let xv = self.value(x);
        let (_, c) = row_geometry(xv);
        let mut out = Vec::with_capacity(xv.len());
        for row in xv.data().chunks(c) {
            let mx = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
            let start = out.len();
            let mut z = T::zero();
            for &v in row {
                let e = ((v - mx) / tau).exp();
                z = z + e;
                out.push(e);
            }
            out[start..].iter_mut().for_each(|e| *e = *e / z);
        }
        let t = Tensor::new(xv.shape().to_vec(), out)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::Softmax { x, tau }, rg))
    }

    /// `log softmax(x / tau)` along the last axis.
    pub fn log_softmax_rows(&mut self, x: Var, tau: T) -> Result<Var> {
        check_tau(tau)?;
        let xv = self.value(x);
        let (_, c) = row_geometry(xv);
        let mut out = Vec::with_capacity(xv.len());
        for row in xv.data().chunks(c) {
            let mx = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
            let z: T = row.iter().map(|&v| ((v - mx) / tau).exp()).sum();
            let lse = z.ln();
            out.extend(row.iter().map(|&v| (v - mx) / tau - lse));
        }
        let t = Tensor::new(xv.shape().to_vec(), out)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::LogSoftmax { x, tau }, rg))
    }

    /// Divides every last-axis row by its L2 norm; a zero row is an error.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let (_, c) = row_geometry(xv);
        let mut norms = Vec::with_capacity(xv.rows());
        let mut out = Vec::with_capacity(xv.len());
        for (i, row) in xv.data().chunks(c).enumerate() {
            let n = row.iter().map(|&v| v * v).sum::<T>().sqrt();
            if !(n > T::of(NORM_FLOOR)) {
                return Err(Error::DegenerateInput {
                    op: "l2_normalize",
                    reason: format!("row {i} has norm {n}"),
                });
            }
            norms.push(n);
            out.extend(row.iter().map(|&v| v / n));
        }
        let t = Tensor::new(xv.shape().to_vec(), out)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::Normalize { x, norms }, rg))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (xv, gv, bv) = (self.value(x), self.value(gamma), self.value(beta));
        let (_, d) = row_geometry(xv);
        if gv.shape() != [d] {
            return Err(Error::dim("layer_norm", xv.shape(), gv.shape()));
        }
        if bv.shape() != [d] {
            return Err(Error::dim("layer_norm", xv.shape(), bv.shape()));
        }
        let eps = T::of(LAYER_NORM_EPS);
        let inv_d = T::one() / T::of(d as f64);
        let mut xhat = Vec::with_capacity(xv.len());
        let mut rstd = Vec::with_capacity(xv.rows());
        let mut out = Vec::with_capacity(xv.len());
        for row in xv.data().chunks(d) {
            let mu = row.iter().copied().sum::<T>() * inv_d;
            let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<T>() * inv_d;
            let r = T::one() / (var + eps).sqrt();
            rstd.push(r);
            for (j, &v) in row.iter().enumerate() {
                let h = (v - mu) * r;
                xhat.push(h);
                out.push(gv.data()[j] * h + bv.data()[j]);
            }
        }
        let t = Tensor::new(xv.shape().to_vec(), out)?;
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(t, Op::LayerNorm { x, gamma, beta, xhat, rstd }, rg))
    }

    // ---- structural -------------------------------------------------------

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::Reshape(x), rg))
    }

    /// Selects first-axis rows; indices may repeat.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        let (r, c) = first_axis(xv);
        if idx.is_empty() {
            return Err(Error::Usage("gather_rows with no indices".into()));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= r) {
            return Err(Error::dim("gather_rows", xv.shape(), &[bad]));
        }
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            out.extend_from_slice(&xv.data()[i * c..(i + 1) * c]);
        }
        let mut shape = xv.shape().to_vec();
        shape[0] = idx.len();
        let t = Tensor::new(shape, out)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::GatherRows { x, idx: idx.to_vec() }, rg))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Usage("concat_rows of nothing".into()))?;
        let tail = self.shape(first)[1..].to_vec();
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let pv = self.value(p);
            if pv.shape()[1..] != tail[..] {
                return Err(Error::dim("concat_rows", self.shape(first), pv.shape()));
            }
            rows += pv.shape()[0];
            out.extend_from_slice(pv.data());
        }
        let mut shape = vec![rows];
        shape.extend(tail);
        let t = Tensor::new(shape, out)?;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(t, Op::ConcatRows(parts.to_vec()), rg))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        let (r, c) = require_2d("slice_cols", xv)?;
        if len == 0 || start + len > c {
            return Err(Error::dim("slice_cols", xv.shape(), &[start, len]));
        }
        let mut out = Vec::with_capacity(r * len);
        for row in xv.data().chunks(c) {
            out.extend_from_slice(&row[start..start + len]);
        }
        let t = Tensor::new(vec![r, len], out)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::SliceCols { x, start }, rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Usage("concat_cols of nothing".into()))?;
        let (r, _) = require_2d("concat_cols", self.value(first))?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pr, pc) = require_2d("concat_cols", self.value(p))?;
            if pr != r {
                return Err(Error::dim("concat_cols", self.shape(first), self.shape(p)));
            }
            widths.push(pc);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(r * total);
        for i in 0..r {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[i * w..(i + 1) * w]);
            }
        }
        let t = Tensor::new(vec![r, total], out)?;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(t, Op::ConcatCols(parts.to_vec()), rg))
    }

    /// `out[idx[i]] += x[i]` into a zero vector of length `len`.
    pub fn scatter_add(&mut self, x: Var, idx: &[usize], len: usize) -> Result<Var> {
        let xv = self.value(x);
        if xv.shape() != [idx.len()] || len == 0 {
            return Err(Error::dim("scatter_add", xv.shape(), &[idx.len(), len]));
        }
        let mut out = vec![T::zero(); len];
        for (&i, &v) in idx.iter().zip(xv.data()) {
            if i >= len {
                return Err(Error::dim("scatter_add", &[len], &[i]));
            }
            out[i] = out[i] + v;
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::vector(out), Op::ScatterAdd { x, idx: idx.to_vec() }, rg))
    }

    // ---- composites -------------------------------------------------------

    /// `softmax(logits / tau)` with parameter validation.
    pub fn softmax_temp(&mut self, logits: Var, tau: T) -> Result<Var> {
        self.softmax_rows(logits, tau)
    }

    /// Dot product of two 1-D tensors, as a `[1]` tensor.
    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("dot", a, b)?;
        let p = self.mul(a, b)?;
        Ok(self.sum(p))
    }

    /// Cosine similarity of two 1-D tensors, as a `[1]` tensor.
    pub fn cosine_similarity(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a).len() != 1 || self.shape(a) != self.shape(b) {
            return Err(Error::dim("cosine_similarity", self.shape(a), self.shape(b)));
        }
        let an = self.l2_normalize_rows(a)?;
        let bn = self.l2_normalize_rows(b)?;
        self.dot(an, bn)
    }

    /// Cosine similarity of a 1-D query against every row of a 2-D table: `[rows]`.
    pub fn cosine_against_rows(&mut self, query: Var, table: Var) -> Result<Var> {
        let d = self.value(query).len();
        let (n, c) = require_2d("cosine_against_rows", self.value(table))?;
        if self.shape(query) != [d] || c != d {
            return Err(Error::dim("cosine_against_rows", self.shape(query), self.shape(table)));
        }
        let qn = self.l2_normalize_rows(query)?;
        let qn = self.reshape(qn, vec![d, 1])?;
        let tn = self.l2_normalize_rows(table)?;
        let s = self.matmul(tn, qn)?;
        self.reshape(s, vec![n])
    }

    // ---- backward ---------------------------------------------------------

    /// Accumulates `d root / d leaf` into every `requires_grad` leaf.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.value(root).len() != 1 {
            return Err(Error::Usage(format!(
                "backward root must be scalar, got shape {:?}",
                self.shape(root)
            )));
        }
        if !self.rg(root) {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<T>>> = Vec::new();
        grads.resize_with(root.0 + 1, || None);
        grads[root.0] = Some(vec![T::one()]);

        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            if let Op::Leaf = self.nodes[i].op {
                let node = &mut self.nodes[i];
                match &mut node.grad {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &b)| *a = *a + b),
                    None => node.grad = Some(g),
                }
                continue;
            }
            self.propagate(i, &g, &mut grads);
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        let nodes = &self.nodes;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [T])| {
            if !nodes[v.0].requires_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![T::zero(); nodes[v.0].value.len()]);
            f(slot);
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                let (m, k) = (av.shape()[0], av.shape()[1]);
                let n = bv.shape()[1];
                acc(*a, &mut |ga| {
                    // ga += g · bᵀ
                    for r in 0..m {
                        let grow = &g[r * n..(r + 1) * n];
                        for t in 0..k {
                            let brow = &bv.data()[t * n..(t + 1) * n];
                            let s: T = grow.iter().zip(brow).map(|(&x, &y)| x * y).sum();
                            ga[r * k + t] = ga[r * k + t] + s;
                        }
                    }
                });
                acc(*b, &mut |gb| {
                    // gb += aᵀ · g
                    for r in 0..m {
                        let grow = &g[r * n..(r + 1) * n];
                        for t in 0..k {
                            let a_rt = av.data()[r * k + t];
                            let dst = &mut gb[t * n..(t + 1) * n];
                            for (d, &x) in dst.iter_mut().zip(grow) {
                                *d = *d + a_rt * x;
                            }
                        }
                    }
                });
            }
            Op::Transpose(a) => {
                let (m, n) = (node.value.shape()[1], node.value.shape()[0]);
                // node is [n×m], input [m×n]
                acc(*a, &mut |ga| {
                    for r in 0..m {
                        for c in 0..n {
                            ga[r * n + c] = ga[r * n + c] + g[c * m + r];
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                acc(*a, &mut |ga| add_into(ga, g));
                acc(*b, &mut |gb| add_into(gb, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |ga| add_into(ga, g));
                acc(*b, &mut |gb| gb.iter_mut().zip(g).for_each(|(d, &x)| *d = *d - x));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                acc(*a, &mut |ga| {
                    for ((d, &x), &y) in ga.iter_mut().zip(g).zip(bv) {
                        *d = *d + x * y;
                    }
                });
                acc(*b, &mut |gb| {
                    for ((d, &x), &y) in gb.iter_mut().zip(g).zip(av) {
                        *d = *d + x * y;
                    }
                });
            }
            Op::AddRow(a, b) => {
                acc(*a, &mut |ga| add_into(ga, g));
                let c = nodes[b.0].value.len();
                acc(*b, &mut |gb| {
                    for row in g.chunks(c) {
                        add_into(gb, row);
                    }
                });
            }
            Op::Scale(a, c) => {
                acc(*a, &mut |ga| ga.iter_mut().zip(g).for_each(|(d, &x)| *d = *d + x * *c));
            }
            Op::Sum(a) => {
                let g0 = g[0];
                acc(*a, &mut |ga| ga.iter_mut().for_each(|d| *d = *d + g0));
            }
            Op::Mean(a) => {
                let g0 = g[0] / T::of(nodes[a.0].value.len() as f64);
                acc(*a, &mut |ga| ga.iter_mut().for_each(|d| *d = *d + g0));
            }
            Op::MeanRows(a) => {
                let r = nodes[a.0].value.shape()[0];
                let inv = T::one() / T::of(r as f64);
                acc(*a, &mut |ga| {
                    for row in ga.chunks_mut(g.len()) {
                        for (d, &x) in row.iter_mut().zip(g) {
                            *d = *d + x * inv;
                        }
                    }
                });
            }
            Op::Abs(a) => {
                let av = nodes[a.0].value.data();
                acc(*a, &mut |ga| {
                    for ((d, &x), &v) in ga.iter_mut().zip(g).zip(av) {
                        let s = if v > T::zero() {
                            T::one()
                        } else if v < T::zero() {
                            -T::one()
                        } else {
                            T::zero()
                        };
                        *d = *d + x * s;
                    }
                });
            }
            Op::Gelu(a) => {
                let av = nodes[a.0].value.data();
                acc(*a, &mut |ga| {
                    for ((d, &x), &v) in ga.iter_mut().zip(g).zip(av) {
                        *d = *d + x * gelu_parts(v).1;
                    }
                });
            }
            Op::Softmax { x, tau } => {
                let y = node.value.data();
                let c = node.value.cols();
                let inv_tau = T::one() / *tau;
                acc(*x, &mut |gx| {
                    for ((gr, yr), dr) in g.chunks(c).zip(y.chunks(c)).zip(gx.chunks_mut(c)) {
                        let s: T = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                        for ((d, &gi), &yi) in dr.iter_mut().zip(gr).zip(yr) {
                            *d = *d + inv_tau * yi * (gi - s);
                        }
                    }
                });
            }
            Op::LogSoftmax { x, tau } => {
                let y = node.value.data();
                let c = node.value.cols();
                let inv_tau = T::one() / *tau;
                acc(*x, &mut |gx| {
                    for ((gr, yr), dr) in g.chunks(c).zip(y.chunks(c)).zip(gx.chunks_mut(c)) {
                        let s: T = gr.iter().copied().sum();
                        for ((d, &gi), &yi) in dr.iter_mut().zip(gr).zip(yr) {
                            *d = *d + inv_tau * (gi - yi.exp() * s);
                        }
                    }
                });
            }
            Op::Normalize { x, norms } => {
                let y = node.value.data();
                let c = node.value.cols();
                acc(*x, &mut |gx| {
                    for (((gr, yr), dr), &n) in
                        g.chunks(c).zip(y.chunks(c)).zip(gx.chunks_mut(c)).zip(norms)
                    {
                        let s: T = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                        for ((d, &gi), &yi) in dr.iter_mut().zip(gr).zip(yr) {
                            *d = *d + (gi - yi * s) / n;
                        }
                    }
                });
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let d = node.value.cols();
                let gam = nodes[gamma.0].value.data();
                acc(*gamma, &mut |gg| {
                    for (gr, hr) in g.chunks(d).zip(xhat.chunks(d)) {
                        for ((o, &gi), &hi) in gg.iter_mut().zip(gr).zip(hr) {
                            *o = *o + gi * hi;
                        }
                    }
                });
                acc(*beta, &mut |gb| {
                    for gr in g.chunks(d) {
                        add_into(gb, gr);
                    }
                });
                acc(*x, &mut |gx| {
                    let inv_d = T::one() / T::of(d as f64);
                    for (((gr, hr), dr), &r) in
                        g.chunks(d).zip(xhat.chunks(d)).zip(gx.chunks_mut(d)).zip(rstd)
                    {
                        let mut m1 = T::zero();
                        let mut m2 = T::zero();
                        for j in 0..d {
                            let dh = gr[j] * gam[j];
                            m1 = m1 + dh;
                            m2 = m2 + dh * hr[j];
                        }
                        m1 = m1 * inv_d;
                        m2 = m2 * inv_d;
                        for j in 0..d {
                            let dh = gr[j] * gam[j];
                            dr[j] = dr[j] + r * (dh - m1 - hr[j] * m2);
                        }
                    }
                });
            }
            Op::Reshape(a) => acc(*a, &mut |ga| add_into(ga, g)),
            Op::GatherRows { x, idx } => {
                let c = node.value.len() / idx.len();
                acc(*x, &mut |gx| {
                    for (k, &i) in idx.iter().enumerate() {
                        add_into(&mut gx[i * c..(i + 1) * c], &g[k * c..(k + 1) * c]);
                    }
                });
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = nodes[p.0].value.len();
                    acc(p, &mut |gp| add_into(gp, &g[off..off + n]));
                    off += n;
                }
            }
            Op::SliceCols { x, start } => {
                let len = node.value.cols();
                let c = nodes[x.0].value.cols();
                acc(*x, &mut |gx| {
                    for (gr, dr) in g.chunks(len).zip(gx.chunks_mut(c)) {
                        add_into(&mut dr[*start..*start + len], gr);
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let total = node.value.cols();
                let mut off = 0;
                for &p in parts {
                    let w = nodes[p.0].value.cols();
                    acc(p, &mut |gp| {
                        for (gr, dr) in g.chunks(total).zip(gp.chunks_mut(w)) {
                            add_into(dr, &gr[off..off + w]);
                        }
                    });
                    off += w;
                }
            }
            Op::ScatterAdd { x, idx } => {
                acc(*x, &mut |gx| {
                    for (d, &i) in gx.iter_mut().zip(idx) {
                        *d = *d + g[i];
                    }
                });
            }
        }
    }
}

fn check_tau<T: Scalar>(tau: T) -> Result<()> {
    if !(tau > T::zero()) || !tau.is_finite() {
        return Err(Error::param("tau", format!("temperature must be positive, got {tau}")));
    }
    Ok(())
}

#[inline]
fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = *d + s;
    }
}

pub(crate) fn matmul_raw<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for t in 0..k {
            let a_it = a[i * k + t];
            let brow = &b[t * n..(t + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o = *o + a_it * bv;
            }
        }
    }
    out
}

fn transpose_raw<T: Scalar>(a: &[T], m: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a[i * n + j];
        }
    }
    out
}
