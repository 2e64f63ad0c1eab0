//! Reverse-mode differentiation over a linear tape.
//!
//! Every primitive appends one node holding its value. Nodes that depend on
//! a gradient-carrying leaf are marked and replayed in reverse by
//! [`Graph::backward`]. Broadcasting is explicit: only `add_row`/`mul_row`
//! (a trailing-axis vector against every row) and `scale_by` (a scalar
//! variable against a whole array) combine arrays of different shapes.

use std::borrow::Cow;
use std::collections::BTreeMap;

use super::array::{numel, permute_data, split_axis, Array};
use super::params::ParamStore;
use crate::error::{Error, Result};

const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    ScaleBy(Var, Var),
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Relu(Var),
    LeakyRelu(Var, f64),
    Sqrt(Var),
    Softmax(Var),
    LayerNorm(Var),
    Sum(Var),
    SumAxis(Var, usize),
    Concat(Vec<Var>, usize),
    Slice(Var, usize, usize),
}

struct Node<'a> {
    value: Cow<'a, Array>,
    op: Op,
    needs_grad: bool,
    param: Option<String>,
}

/// Tape of array operations.
pub struct Graph<'a> {
    nodes: Vec<Node<'a>>,
    grad_enabled: bool,
}

/// Gradients produced by one backward pass, indexed by node.
pub struct Grads {
    by_node: Vec<Option<Vec<f64>>>,
}

impl Default for Graph<'_> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'a> Graph<'a> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grad_enabled: true,
        }
    }

    /// A graph that never records gradients; every node is a constant.
    pub fn no_grad() -> Self {
        Self {
            nodes: Vec::new(),
            grad_enabled: false,
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Array {
        &self.nodes[v.0].value
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Array, op: Op, needs_grad: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("output of {}", op_name(&op))));
        }
        let needs_grad = needs_grad && self.grad_enabled;
        let op = if needs_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op,
            needs_grad,
            param: None,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn constant(&mut self, value: Array) -> Var {
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op: Op::Leaf,
            needs_grad: false,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant_ref(&mut self, value: &'a Array) -> Var {
        self.nodes.push(Node {
            value: Cow::Borrowed(value),
            op: Op::Leaf,
            needs_grad: false,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// A free input that receives a gradient (useful for checks and probes).
    pub fn input(&mut self, value: Array) -> Var {
        let needs_grad = self.grad_enabled;
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op: Op::Leaf,
            needs_grad,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Register a named parameter. Frozen parameters are plain constants.
    pub fn param(&mut self, name: &str, value: &'a Array, trainable: bool) -> Var {
        let needs_grad = trainable && self.grad_enabled;
        self.nodes.push(Node {
            value: Cow::Borrowed(value),
            op: Op::Leaf,
            needs_grad,
            param: Some(name.to_string()),
        });
        Var(self.nodes.len() - 1)
    }

    fn binary_same(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::shape(op, sa, sb));
        }
        Ok(())
    }

    fn grad2(&self, a: Var, b: Var) -> bool {
        self.needs_grad(a) || self.needs_grad(b)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same("add", a, b)?;
        let out = self.value(a).add(self.value(b))?;
        let ng = self.grad2(a, b);
        self.push(out, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same("sub", a, b)?;
        let out = self.value(a).sub(self.value(b))?;
        let ng = self.grad2(a, b);
        self.push(out, Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same("mul", a, b)?;
        let out = self.value(a).mul(self.value(b))?;
        let ng = self.grad2(a, b);
        self.push(out, Op::Mul(a, b), ng)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let out = self.value(a).scale(c);
        let ng = self.needs_grad(a);
        self.push(out, Op::Scale(a, c), ng)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        let out = self.value(a).map(|v| v + c);
        let ng = self.needs_grad(a);
        self.push(out, Op::AddScalar(a), ng)
    }

    fn row_check(&self, op: &'static str, x: Var, r: Var) -> Result<usize> {
        let (sx, sr) = (self.value(x).shape(), self.value(r).shape());
        let d = *sx.last().ok_or_else(|| Error::shape(op, sx, sr))?;
        if numel(sr) != d {
            return Err(Error::shape(op, sx, sr));
        }
        Ok(d)
    }

    /// `x[.., j] + b[j]` for every leading index.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let d = self.row_check("add_row", x, b)?;
        let bv = self.value(b).data();
        let xv = self.value(x);
        let data = xv
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v + bv[i % d])
            .collect();
        let out = Array::from_parts(xv.shape().to_vec(), data);
        let ng = self.grad2(x, b);
        self.push(out, Op::AddRow(x, b), ng)
    }

    /// `x[.., j] * r[j]` for every leading index.
    pub fn mul_row(&mut self, x: Var, r: Var) -> Result<Var> {
        let d = self.row_check("mul_row", x, r)?;
        let rv = self.value(r).data();
        let xv = self.value(x);
        let data = xv
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v * rv[i % d])
            .collect();
        let out = Array::from_parts(xv.shape().to_vec(), data);
        let ng = self.grad2(x, r);
        self.push(out, Op::MulRow(x, r), ng)
    }

    /// `x * s` where `s` holds a single value.
    pub fn scale_by(&mut self, x: Var, s: Var) -> Result<Var> {
        let sv = self.value(s);
        if sv.len() != 1 {
            return Err(Error::shape("scale_by", self.value(x).shape(), sv.shape()));
        }
        let c = sv.data()[0];
        let out = self.value(x).scale(c);
        let ng = self.grad2(x, s);
        self.push(out, Op::ScaleBy(x, s), ng)
    }

    fn mat_dims(&self, op: &'static str, a: Var, b: Var) -> Result<(usize, usize, usize, usize)> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa.len() != 2 || sb.len() != 2 {
            return Err(Error::shape(op, sa, sb));
        }
        Ok((sa[0], sa[1], sb[0], sb[1]))
    }

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k, k2, n) = self.mat_dims("matmul", a, b)?;
        if k != k2 {
            return Err(Error::shape(
                "matmul",
                self.value(a).shape(),
                self.value(b).shape(),
            ));
        }
        let data = kernels::matmul(self.value(a).data(), self.value(b).data(), m, k, n);
        let ng = self.grad2(a, b);
        self.push(Array::from_parts(vec![m, n], data), Op::MatMul(a, b), ng)
    }

    /// `[m, k] x [n, k]^T -> [m, n]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k, n, k2) = self.mat_dims("matmul_nt", a, b)?;
        if k != k2 {
            return Err(Error::shape(
                "matmul_nt",
                self.value(a).shape(),
                self.value(b).shape(),
            ));
        }
        let data = kernels::matmul_nt(self.value(a).data(), self.value(b).data(), m, k, n);
        let ng = self.grad2(a, b);
        self.push(Array::from_parts(vec![m, n], data), Op::MatMulNT(a, b), ng)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshape(shape)?;
        let ng = self.needs_grad(a);
        self.push(out, Op::Reshape(a), ng)
    }

    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let out = self.value(a).permute(perm)?;
        let ng = self.needs_grad(a);
        self.push(out, Op::Permute(a, perm.to_vec()), ng)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|v| v.max(0.0));
        let ng = self.needs_grad(a);
        self.push(out, Op::Relu(a), ng)
    }

    /// `x` for positive inputs, `slope * x` otherwise.
    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Result<Var> {
        let out = self.value(a).map(|v| if v > 0.0 { v } else { slope * v });
        let ng = self.needs_grad(a);
        self.push(out, Op::LeakyRelu(a, slope), ng)
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        if v.data().iter().any(|&x| x < 0.0) {
            return Err(Error::invalid("sqrt of negative value"));
        }
        let out = v.map(f64::sqrt);
        let ng = self.needs_grad(a);
        self.push(out, Op::Sqrt(a), ng)
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        let d = *v
            .shape()
            .last()
            .ok_or_else(|| Error::invalid("softmax of a scalar"))?;
        let mut data = v.data().to_vec();
        for row in data.chunks_mut(d) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for x in row.iter_mut() {
                *x = (*x - max).exp();
                total += *x;
            }
            for x in row.iter_mut() {
                *x /= total;
            }
        }
        let out = Array::from_parts(v.shape().to_vec(), data);
        let ng = self.needs_grad(a);
        self.push(out, Op::Softmax(a), ng)
    }

    /// Normalize the last axis to zero mean and unit variance (no affine).
    pub fn layer_norm(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        let d = *v
            .shape()
            .last()
            .ok_or_else(|| Error::invalid("layer_norm of a scalar"))?;
        let mut data = v.data().to_vec();
        for row in data.chunks_mut(d) {
            let (_, inv) = row_stats(row);
            let mean = row.iter().sum::<f64>() / d as f64;
            for x in row.iter_mut() {
                *x = (*x - mean) * inv;
            }
        }
        let out = Array::from_parts(v.shape().to_vec(), data);
        let ng = self.needs_grad(a);
        self.push(out, Op::LayerNorm(a), ng)
    }

    /// Sum of all entries, as a scalar.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let out = Array::scalar(self.value(a).sum());
        let ng = self.needs_grad(a);
        self.push(out, Op::Sum(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).len() as f64;
        let s = self.sum(a)?;
        self.scale(s, 1.0 / n)
    }

    /// Sum over one axis, removing it.
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let v = self.value(a);
        if axis >= v.ndim() {
            return Err(Error::invalid(format!(
                "sum_axis {axis} for shape {:?}",
                v.shape()
            )));
        }
        let (outer, n, inner) = split_axis(v.shape(), axis);
        let mut data = vec![0.0; outer * inner];
        for o in 0..outer {
            for i in 0..n {
                let src = &v.data()[(o * n + i) * inner..(o * n + i + 1) * inner];
                for (d, s) in data[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        let mut shape = v.shape().to_vec();
        shape.remove(axis);
        let ng = self.needs_grad(a);
        self.push(Array::from_parts(shape, data), Op::SumAxis(a, axis), ng)
    }

    /// Mean over several axes, removing them.
    pub fn mean_axes(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let mut sorted = axes.to_vec();
        sorted.sort_unstable();
        sorted.dedup();
        let shape = self.value(a).shape().to_vec();
        let mut count = 1usize;
        let mut out = a;
        for &ax in sorted.iter().rev() {
            if ax >= shape.len() {
                return Err(Error::invalid(format!(
                    "mean axis {ax} for shape {shape:?}"
                )));
            }
            count *= shape[ax];
            out = self.sum_axis(out, ax)?;
        }
        self.scale(out, 1.0 / count as f64)
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let arrays: Vec<&Array> = parts.iter().map(|&p| self.value(p)).collect();
        let out = Array::concat(&arrays, axis)?;
        let ng = parts.iter().any(|&p| self.needs_grad(p));
        self.push(out, Op::Concat(parts.to_vec(), axis), ng)
    }

    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let out = self.value(a).slice_axis(axis, start, len)?;
        let ng = self.needs_grad(a);
        self.push(out, Op::Slice(a, axis, start), ng)
    }

    /// Constant sinusoidal embedding of a timestep.
    pub fn sinusoidal(&mut self, t: f64, dim: usize) -> Var {
        self.constant(sinusoidal_embedding(t, dim))
    }

    /// Reverse pass from a scalar loss.
    pub fn backward(&self, loss: Var) -> Result<Grads> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::invalid(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if !self.nodes[loss.0].needs_grad {
            return Ok(Grads { by_node: grads });
        }
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(gy) = grads[i].take() else { continue };
            self.backward_node(i, &gy, &mut grads);
            grads[i] = Some(gy);
        }
        Ok(Grads { by_node: grads })
    }

    fn acc(&self, grads: &mut [Option<Vec<f64>>], v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.len()]);
        f(slot);
    }

    fn backward_node(&self, i: usize, gy: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let out = &self.nodes[i].value;
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.acc(grads, *a, |g| axpy(g, gy, 1.0));
                self.acc(grads, *b, |g| axpy(g, gy, 1.0));
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, |g| axpy(g, gy, 1.0));
                self.acc(grads, *b, |g| axpy(g, gy, -1.0));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                self.acc(grads, *a, |g| {
                    for ((g, y), x) in g.iter_mut().zip(gy).zip(bv) {
                        *g += y * x;
                    }
                });
                self.acc(grads, *b, |g| {
                    for ((g, y), x) in g.iter_mut().zip(gy).zip(av) {
                        *g += y * x;
                    }
                });
            }
            Op::Scale(a, c) => self.acc(grads, *a, |g| axpy(g, gy, *c)),
            Op::AddScalar(a) | Op::Reshape(a) => self.acc(grads, *a, |g| axpy(g, gy, 1.0)),
            Op::AddRow(x, b) => {
                let d = self.value(*b).len();
                self.acc(grads, *x, |g| axpy(g, gy, 1.0));
                self.acc(grads, *b, |g| {
                    for row in gy.chunks(d) {
                        axpy(g, row, 1.0);
                    }
                });
            }
            Op::MulRow(x, r) => {
                let rv = self.value(*r).data();
                let xv = self.value(*x).data();
                let d = rv.len();
                self.acc(grads, *x, |g| {
                    for (j, (g, y)) in g.iter_mut().zip(gy).enumerate() {
                        *g += y * rv[j % d];
                    }
                });
                self.acc(grads, *r, |g| {
                    for (j, (y, x)) in gy.iter().zip(xv).enumerate() {
                        g[j % d] += y * x;
                    }
                });
            }
            Op::ScaleBy(x, s) => {
                let c = self.value(*s).data()[0];
                let xv = self.value(*x).data();
                self.acc(grads, *x, |g| axpy(g, gy, c));
                self.acc(grads, *s, |g| {
                    g[0] += gy.iter().zip(xv).map(|(y, x)| y * x).sum::<f64>();
                });
            }
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.value(*a).shape(), self.value(*b).shape());
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                self.acc(grads, *a, |g| kernels::matmul_nt_acc(g, gy, bv, m, n, k));
                self.acc(grads, *b, |g| kernels::matmul_tn_acc(g, av, gy, m, k, n));
            }
            Op::MatMulNT(a, b) => {
                let (sa, sb) = (self.value(*a).shape(), self.value(*b).shape());
                let (m, k, n) = (sa[0], sa[1], sb[0]);
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                // y = a b^T: da = gy b, db = gy^T a
                self.acc(grads, *a, |g| kernels::matmul_acc(g, gy, bv, m, n, k));
                self.acc(grads, *b, |g| kernels::matmul_tn_acc(g, gy, av, m, n, k));
            }
            Op::Permute(a, perm) => {
                let mut inv = vec![0usize; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                let (_, back) =
                    permute_data(out.shape(), gy, &inv).expect("valid inverse permutation");
                self.acc(grads, *a, |g| axpy(g, &back, 1.0));
            }
            Op::Relu(a) => {
                let av = self.value(*a).data();
                self.acc(grads, *a, |g| {
                    for ((g, y), x) in g.iter_mut().zip(gy).zip(av) {
                        if *x > 0.0 {
                            *g += y;
                        }
                    }
                });
            }
            Op::LeakyRelu(a, slope) => {
                let av = self.value(*a).data();
                self.acc(grads, *a, |g| {
                    for ((g, y), x) in g.iter_mut().zip(gy).zip(av) {
                        *g += if *x > 0.0 { *y } else { slope * y };
                    }
                });
            }
            Op::Sqrt(a) => {
                let yv = out.data();
                self.acc(grads, *a, |g| {
                    for ((g, dy), y) in g.iter_mut().zip(gy).zip(yv) {
                        *g += dy * 0.5 / y;
                    }
                });
            }
            Op::Softmax(a) => {
                let d = *out.shape().last().unwrap();
                let yv = out.data();
                self.acc(grads, *a, |g| {
                    for ((g, dy), y) in g.chunks_mut(d).zip(gy.chunks(d)).zip(yv.chunks(d)) {
                        let dot: f64 = dy.iter().zip(y).map(|(a, b)| a * b).sum();
                        for j in 0..d {
                            g[j] += y[j] * (dy[j] - dot);
                        }
                    }
                });
            }
            Op::LayerNorm(a) => {
                let xv = self.value(*a).data();
                let d = *out.shape().last().unwrap();
                let yv = out.data();
                self.acc(grads, *a, |g| {
                    for (((g, dy), y), x) in g
                        .chunks_mut(d)
                        .zip(gy.chunks(d))
                        .zip(yv.chunks(d))
                        .zip(xv.chunks(d))
                    {
                        let (_, inv) = row_stats(x);
                        let mean_dy = dy.iter().sum::<f64>() / d as f64;
                        let mean_dyy = dy.iter().zip(y).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                        for j in 0..d {
                            g[j] += inv * (dy[j] - mean_dy - y[j] * mean_dyy);
                        }
                    }
                });
            }
            Op::Sum(a) => {
                let s = gy[0];
                self.acc(grads, *a, |g| g.iter_mut().for_each(|g| *g += s));
            }
            Op::SumAxis(a, axis) => {
                let (outer, n, inner) = split_axis(self.value(*a).shape(), *axis);
                self.acc(grads, *a, |g| {
                    for o in 0..outer {
                        let src = &gy[o * inner..(o + 1) * inner];
                        for i in 0..n {
                            axpy(
                                &mut g[(o * n + i) * inner..(o * n + i + 1) * inner],
                                src,
                                1.0,
                            );
                        }
                    }
                });
            }
            Op::Concat(parts, axis) => {
                let (outer, total, inner) = split_axis(out.shape(), *axis);
                let mut offset = 0;
                for &p in parts {
                    let n = self.value(p).shape()[*axis];
                    self.acc(grads, p, |g| {
                        for o in 0..outer {
                            let src =
                                &gy[(o * total + offset) * inner..(o * total + offset + n) * inner];
                            axpy(&mut g[o * n * inner..(o + 1) * n * inner], src, 1.0);
                        }
                    });
                    offset += n;
                }
            }
            Op::Slice(a, axis, start) => {
                let (outer, n, inner) = split_axis(self.value(*a).shape(), *axis);
                let len = out.shape()[*axis];
                self.acc(grads, *a, |g| {
                    for o in 0..outer {
                        let dst = &mut g[(o * n + start) * inner..(o * n + start + len) * inner];
                        axpy(dst, &gy[o * len * inner..(o + 1) * len * inner], 1.0);
                    }
                });
            }
        }
    }

    /// Gradient for every parameter in `store`: summed over all nodes that
    /// registered the same name, zero for parameters the loss never reached.
    pub fn param_grads(&self, grads: &Grads, store: &ParamStore) -> BTreeMap<String, Array> {
        let mut out: BTreeMap<String, Array> = store
            .iter()
            .map(|(name, a)| (name.clone(), Array::zeros(a.shape())))
            .collect();
        for (i, node) in self.nodes.iter().enumerate() {
            let (Some(name), Some(g)) = (&node.param, &grads.by_node[i]) else {
                continue;
            };
            if let Some(dst) = out.get_mut(name) {
                axpy(dst.data_mut(), g, 1.0);
            }
        }
        out
    }
}

impl Grads {
    /// Gradient with respect to `v`, or `None` if it did not need one.
    pub fn get(&self, graph: &Graph<'_>, v: Var) -> Option<Array> {
        let g = self.by_node.get(v.0)?.as_ref()?;
        Some(Array::from_parts(
            graph.value(v).shape().to_vec(),
            g.clone(),
        ))
    }

    /// Like [`Grads::get`] but zero-filled for unreached nodes.
    pub fn get_or_zero(&self, graph: &Graph<'_>, v: Var) -> Array {
        self.get(graph, v)
            .unwrap_or_else(|| Array::zeros(graph.value(v).shape()))
    }
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::Add(..) => "add",
        Op::Sub(..) => "sub",
        Op::Mul(..) => "mul",
        Op::Scale(..) => "scale",
        Op::AddScalar(..) => "add_scalar",
        Op::AddRow(..) => "add_row",
        Op::MulRow(..) => "mul_row",
        Op::ScaleBy(..) => "scale_by",
        Op::MatMul(..) => "matmul",
        Op::MatMulNT(..) => "matmul_nt",
        Op::Reshape(..) => "reshape",
        Op::Permute(..) => "permute",
        Op::Relu(..) => "relu",
        Op::LeakyRelu(..) => "leaky_relu",
        Op::Sqrt(..) => "sqrt",
        Op::Softmax(..) => "softmax",
        Op::LayerNorm(..) => "layer_norm",
        Op::Sum(..) => "sum",
        Op::SumAxis(..) => "sum_axis",
        Op::Concat(..) => "concat",
        Op::Slice(..) => "slice",
    }
}

fn row_stats(row: &[f64]) -> (f64, f64) {
    let d = row.len() as f64;
    let mean = row.iter().sum::<f64>() / d;
    let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / d;
    (mean, 1.0 / (var + LAYER_NORM_EPS).sqrt())
}

fn axpy(dst: &mut [f64], src: &[f64], a: f64) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += a * s;
    }
}

/// Transformer-style sinusoidal embedding: `[sin(t w_i), cos(t w_i)]` with
/// `w_i = 10000^(-i / (dim/2))`.
pub fn sinusoidal_embedding(t: f64, dim: usize) -> Array {
    let half = dim / 2;
    let mut data = vec![0.0; dim];
    for i in 0..half {
        let freq = (-(10000f64.ln()) * i as f64 / half as f64).exp();
        data[i] = (t * freq).sin();
        data[half + i] = (t * freq).cos();
    }
    Array::from_parts(vec![dim], data)
}

pub(crate) mod kernels {
    /// `a[m,k] b[k,n]`.
    pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut out = vec![0.0; m * n];
        matmul_acc(&mut out, a, b, m, k, n);
        out
    }

    /// `out[m,n] += a[m,k] b[k,n]`.
    pub fn matmul_acc(out: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
        for i in 0..m {
            let row = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let x = a[i * k + p];
                if x == 0.0 {
                    continue;
                }
                for (o, y) in row.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                    *o += x * y;
                }
            }
        }
    }

    /// `a[m,k] b[n,k]^T`.
    pub fn matmul_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut out = vec![0.0; m * n];
        matmul_nt_acc(&mut out, a, b, m, k, n);
        out
    }

    /// `out[m,n] += a[m,k] b[n,k]^T`.
    pub fn matmul_nt_acc(out: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
        for i in 0..m {
            let ar = &a[i * k..(i + 1) * k];
            for j in 0..n {
                let br = &b[j * k..(j + 1) * k];
                out[i * n + j] += ar.iter().zip(br).map(|(x, y)| x * y).sum::<f64>();
            }
        }
    }

    /// `out[k,n] += a[m,k]^T b[m,n]`.
    pub fn matmul_tn_acc(out: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
        for i in 0..m {
            let br = &b[i * n..(i + 1) * n];
            for p in 0..k {
                let x = a[i * k + p];
                if x == 0.0 {
                    continue;
                }
                for (o, y) in out[p * n..(p + 1) * n].iter_mut().zip(br) {
                    *o += x * y;
                }
            }
        }
    }
}
