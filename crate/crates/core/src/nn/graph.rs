//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation of one forward pass. Nodes are
//! appended in creation order, so reverse index order is a valid
//! topological order for the backward sweep.

use std::collections::HashMap;

use rand::Rng;

use super::tensor::{gelu, gelu_grad, Tensor};
use super::{NnError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
}

/// Named trainable tensors of a model.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.params.push(Param {
            name: name.into(),
            value,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }
}

/// Gradient buffers, one per parameter. `backward` adds into them; call
/// [`Gradients::zero`] between independent steps.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    grads: Vec<Tensor>,
}

impl Gradients {
    pub fn zeros_like(store: &ParamStore) -> Self {
        Gradients {
            grads: store.params().iter().map(|p| Tensor::zeros(p.value.shape())).collect(),
        }
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.grads[id.0]
    }

    pub fn all(&self) -> &[Tensor] {
        &self.grads
    }

    pub fn zero(&mut self) {
        for g in &mut self.grads {
            g.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for g in &mut self.grads {
            g.data_mut().iter_mut().for_each(|v| *v *= factor);
        }
    }

    /// Elementwise `self += other`; both must come from the same store.
    pub fn add(&mut self, other: &Gradients) {
        for (a, b) in self.grads.iter_mut().zip(&other.grads) {
            a.data_mut().iter_mut().zip(b.data()).for_each(|(x, y)| *x += y);
        }
    }

    pub fn norm(&self) -> f64 {
        self.grads.iter().map(Tensor::norm_sq).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.grads.iter().all(|g| g.data().iter().all(|v| v.is_finite()))
    }

    /// Rescales so the global L2 norm is at most `max_norm`; returns the
    /// norm before clipping.
    pub fn clip_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.norm();
        if norm > max_norm && norm > 0.0 {
            self.scale(max_norm / norm);
        }
        norm
    }

    fn accumulate(&mut self, id: ParamId, grad: &[f64]) {
        for (g, d) in self.grads[id.0].data_mut().iter_mut().zip(grad) {
            *g += d;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Broadcast {
    Same,
    Row,
    Scalar,
}

impl Broadcast {
    fn index(self, i: usize, cols: usize) -> usize {
        match self {
            Broadcast::Same => i,
            Broadcast::Row => i % cols,
            Broadcast::Scalar => 0,
        }
    }
}

#[derive(Debug, Clone, Copy)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    Elementwise(Binary, Var, Var, Broadcast),
    Scale(Var, f64),
    AddScalar(Var),
    Exp(Var),
    Ln(Var),
    Relu(Var),
    Gelu(Var),
    Sum(Var),
    Mean(Var),
    RowSum(Var),
    Reshape(Var),
    Transpose(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    Embedding(Var, Vec<usize>),
    Softmax(Var, f64),
    LogSoftmax(Var, f64),
    LayerNorm(Var, f64),
    Dropout(Var, Vec<f64>),
    Pick(Var, Vec<usize>),
    Clamp(Var, f64, f64),
    Minimum(Var, Var),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    param_vars: HashMap<ParamId, Var>,
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> NnError {
    NnError::Shape {
        op,
        left: a.shape().to_vec(),
        right: b.shape().to_vec(),
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Leaf bound to a parameter; repeated calls reuse the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(v) = self.param_vars.get(&id) {
            return *v;
        }
        let v = self.push(store.get(id).clone(), Op::Param(id), true);
        self.param_vars.insert(id, v);
        v
    }

    /// Same value, no gradient flows back through it.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    fn elementwise(&mut self, kind: Binary, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let bc = if ta.numel() == tb.numel() && (ta.shape() == tb.shape() || tb.rows() <= 1 || ta.rows() <= 1) {
            Broadcast::Same
        } else if tb.numel() == 1 {
            Broadcast::Scalar
        } else if tb.numel() == ta.cols() {
            Broadcast::Row
        } else {
            let name = match kind {
                Binary::Add => "add",
                Binary::Sub => "sub",
                Binary::Mul => "mul",
                Binary::Div => "div",
            };
            return Err(shape_err(name, ta, tb));
        };
        let cols = ta.cols();
        let bd = tb.data();
        let data: Vec<f64> = ta
            .data()
            .iter()
            .enumerate()
            .map(|(i, x)| {
                let y = bd[bc.index(i, cols)];
                match kind {
                    Binary::Add => x + y,
                    Binary::Sub => x - y,
                    Binary::Mul => x * y,
                    Binary::Div => x / y,
                }
            })
            .collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Elementwise(kind, a, b, bc), rg))
    }

    /// Elementwise; `b` may also be a row vector or a scalar.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(Binary::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(Binary::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(Binary::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(Binary::Div, a, b)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|x| x * c);
        let rg = self.rg(a);
        self.push(out, Op::Scale(a, c), rg)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|x| x + c);
        let rg = self.rg(a);
        self.push(out, Op::AddScalar(a), rg)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::exp);
        let rg = self.rg(a);
        self.push(out, Op::Exp(a), rg)
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::ln);
        let rg = self.rg(a);
        self.push(out, Op::Ln(a), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.max(0.0));
        let rg = self.rg(a);
        self.push(out, Op::Relu(a), rg)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(gelu);
        let rg = self.rg(a);
        self.push(out, Op::Gelu(a), rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        let rg = self.rg(a);
        self.push(out, Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let out = Tensor::scalar(t.sum() / t.numel() as f64);
        let rg = self.rg(a);
        self.push(out, Op::Mean(a), rg)
    }

    /// `[r, c] -> [r, 1]`.
    pub fn row_sum(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let data: Vec<f64> = (0..t.rows()).map(|r| t.row(r).iter().sum()).collect();
        let out = Tensor::matrix(t.rows(), 1, data);
        let rg = self.rg(a);
        self.push(out, Op::RowSum(a), rg)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).reshape(shape)?;
        let rg = self.rg(a);
        Ok(self.push(out, Op::Reshape(a), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = self.value(a).transpose();
        let rg = self.rg(a);
        self.push(out, Op::Transpose(a), rg)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.value(parts[0]).rows();
        for p in parts {
            if self.value(*p).rows() != rows {
                return Err(shape_err("concat_cols", self.value(parts[0]), self.value(*p)));
            }
        }
        let tensors: Vec<&Tensor> = parts.iter().map(|p| self.value(*p)).collect();
        let out = Tensor::concat_cols(&tensors);
        let rg = parts.iter().any(|p| self.rg(*p));
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = self.value(parts[0]).cols();
        for p in parts {
            if self.value(*p).cols() != cols {
                return Err(shape_err("concat_rows", self.value(parts[0]), self.value(*p)));
            }
        }
        let tensors: Vec<&Tensor> = parts.iter().map(|p| self.value(*p)).collect();
        let out = Tensor::concat_rows(&tensors);
        let rg = parts.iter().any(|p| self.rg(*p));
        Ok(self.push(out, Op::ConcatRows(parts.to_vec()), rg))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let t = self.value(a);
        if start > end || end > t.cols() {
            return Err(NnError::Shape {
                op: "slice_cols",
                left: t.shape().to_vec(),
                right: vec![start, end],
            });
        }
        let out = t.slice_cols(start, end);
        let rg = self.rg(a);
        Ok(self.push(out, Op::SliceCols(a, start), rg))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let t = self.value(a);
        if start > end || end > t.rows() {
            return Err(NnError::Shape {
                op: "slice_rows",
                left: t.shape().to_vec(),
                right: vec![start, end],
            });
        }
        let out = t.slice_rows(start, end);
        let rg = self.rg(a);
        Ok(self.push(out, Op::SliceRows(a, start), rg))
    }

    /// Gathers rows `ids` of `table`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.value(table);
        if let Some(bad) = ids.iter().find(|&&i| i >= t.rows()) {
            return Err(NnError::Shape {
                op: "embedding",
                left: t.shape().to_vec(),
                right: vec![*bad],
            });
        }
        let c = t.cols();
        let data: Vec<f64> = ids.iter().flat_map(|&i| t.row(i).iter().copied()).collect();
        let out = Tensor::matrix(ids.len(), c, data);
        let rg = self.rg(table);
        Ok(self.push(out, Op::Embedding(table, ids.to_vec()), rg))
    }

    /// Softmax of `a / temperature` along `axis` (last axis, or axis 0 of a
    /// matrix).
    pub fn softmax(&mut self, a: Var, axis: usize, temperature: f64) -> Result<Var> {
        let ndim = self.value(a).shape().len().max(1);
        if axis == ndim - 1 {
            let out = self.value(a).softmax_rows(temperature);
            let rg = self.rg(a);
            Ok(self.push(out, Op::Softmax(a, temperature), rg))
        } else if axis == 0 && ndim == 2 {
            let t = self.transpose(a);
            let s = self.softmax(t, 1, temperature)?;
            Ok(self.transpose(s))
        } else {
            Err(NnError::Shape {
                op: "softmax",
                left: self.value(a).shape().to_vec(),
                right: vec![axis],
            })
        }
    }

    /// Row-wise log-softmax of `a / temperature`.
    pub fn log_softmax(&mut self, a: Var, temperature: f64) -> Var {
        let out = self.value(a).log_softmax_rows(temperature);
        let rg = self.rg(a);
        self.push(out, Op::LogSoftmax(a, temperature), rg)
    }

    /// Row-wise normalization without affine parameters.
    pub fn layer_norm(&mut self, a: Var, eps: f64) -> Var {
        let out = self.value(a).layer_norm_rows(eps);
        let rg = self.rg(a);
        self.push(out, Op::LayerNorm(a, eps), rg)
    }

    /// Inverted dropout; identity when `p == 0` or no RNG is supplied.
    pub fn dropout<R: Rng + ?Sized>(&mut self, a: Var, p: f64, rng: Option<&mut R>) -> Var {
        let rng = match rng {
            Some(r) if p > 0.0 => r,
            _ => return a,
        };
        let keep = 1.0 - p;
        let mask: Vec<f64> = (0..self.value(a).numel())
            .map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        let out = self.value(a).zip_map(&Tensor::vector(mask.clone()), |x, m| x * m);
        let rg = self.rg(a);
        self.push(out, Op::Dropout(a, mask), rg)
    }

    /// One element per row: `out[r] = a[r, idx[r]]`.
    pub fn pick(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let t = self.value(a);
        if idx.len() != t.rows() || idx.iter().any(|&i| i >= t.cols()) {
            return Err(NnError::Shape {
                op: "pick",
                left: t.shape().to_vec(),
                right: vec![idx.len()],
            });
        }
        let data: Vec<f64> = idx.iter().enumerate().map(|(r, &i)| t.row(r)[i]).collect();
        let out = Tensor::vector(data);
        let rg = self.rg(a);
        Ok(self.push(out, Op::Pick(a, idx.to_vec()), rg))
    }

    /// Gradient passes only where `lo < x < hi`.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let out = self.value(a).map(|x| x.clamp(lo, hi));
        let rg = self.rg(a);
        self.push(out, Op::Clamp(a, lo, hi), rg)
    }

    /// Elementwise minimum; ties send the gradient to `a`.
    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.numel() != tb.numel() {
            return Err(shape_err("minimum", ta, tb));
        }
        let out = ta.zip_map(tb, f64::min);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Minimum(a, b), rg))
    }

    /// Back-propagates from a scalar `loss`, adding parameter gradients into
    /// `grads`.
    pub fn backward(&self, loss: Var, grads: &mut Gradients) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(NnError::NotScalar(self.value(loss).shape().to_vec()));
        }
        let mut g: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        g[loss.0] = Some(vec![1.0]);

        fn acc(g: &mut [Option<Vec<f64>>], nodes: &[Node], v: Var, f: impl FnOnce(&mut [f64])) {
            if !nodes[v.0].requires_grad {
                return;
            }
            let slot = g[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.numel()]);
            f(slot);
        }

        for i in (0..=loss.0).rev() {
            let gout = match g[i].take() {
                Some(x) => x,
                None => continue,
            };
            let node = &self.nodes[i];
            let nodes = &self.nodes;
            match &node.op {
                Op::Leaf => {}
                Op::Param(id) => grads.accumulate(*id, &gout),
                Op::MatMul(a, b) => {
                    let gt = Tensor::matrix(node.value.rows(), node.value.cols(), gout);
                    if nodes[a.0].requires_grad {
                        let da = gt.matmul_t(&nodes[b.0].value)?;
                        acc(&mut g, nodes, *a, |s| add_into(s, da.data()));
                    }
                    if nodes[b.0].requires_grad {
                        let da = nodes[a.0].value.transpose().matmul(&gt)?;
                        acc(&mut g, nodes, *b, |s| add_into(s, da.data()));
                    }
                }
                Op::Elementwise(kind, a, b, bc) => {
                    let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
                    let cols = ta.cols();
                    let (ad, bd) = (ta.data(), tb.data());
                    let kind = *kind;
                    let bc = *bc;
                    acc(&mut g, nodes, *a, |s| {
                        for (k, go) in gout.iter().enumerate() {
                            let y = bd[bc.index(k, cols)];
                            s[k] += match kind {
                                Binary::Add | Binary::Sub => *go,
                                Binary::Mul => go * y,
                                Binary::Div => go / y,
                            };
                        }
                    });
                    acc(&mut g, nodes, *b, |s| {
                        for (k, go) in gout.iter().enumerate() {
                            let j = bc.index(k, cols);
                            let (x, y) = (ad[k], bd[j]);
                            s[j] += match kind {
                                Binary::Add => *go,
                                Binary::Sub => -go,
                                Binary::Mul => go * x,
                                Binary::Div => -go * x / (y * y),
                            };
                        }
                    });
                }
                Op::Scale(a, c) => acc(&mut g, nodes, *a, |s| {
                    for (x, go) in s.iter_mut().zip(&gout) {
                        *x += go * c;
                    }
                }),
                Op::AddScalar(a) | Op::Reshape(a) => acc(&mut g, nodes, *a, |s| add_into(s, &gout)),
                Op::Exp(a) => {
                    let y = node.value.data();
                    acc(&mut g, nodes, *a, |s| {
                        for k in 0..s.len() {
                            s[k] += gout[k] * y[k];
                        }
                    })
                }
                Op::Ln(a) => {
                    let x = nodes[a.0].value.data();
                    acc(&mut g, nodes, *a, |s| {
                        for k in 0..s.len() {
                            s[k] += gout[k] / x[k];
                        }
                    })
                }
                Op::Relu(a) => {
                    let x = nodes[a.0].value.data();
                    acc(&mut g, nodes, *a, |s| {
                        for k in 0..s.len() {
                            if x[k] > 0.0 {
                                s[k] += gout[k];
                            }
                        }
                    })
                }
                Op::Gelu(a) => {
                    let x = nodes[a.0].value.data();
                    acc(&mut g, nodes, *a, |s| {
                        for k in 0..s.len() {
                            s[k] += gout[k] * gelu_grad(x[k]);
                        }
                    })
                }
                Op::Sum(a) => acc(&mut g, nodes, *a, |s| s.iter_mut().for_each(|x| *x += gout[0])),
                Op::Mean(a) => {
                    let n = nodes[a.0].value.numel() as f64;
                    acc(&mut g, nodes, *a, |s| s.iter_mut().for_each(|x| *x += gout[0] / n))
                }
                Op::RowSum(a) => {
                    let c = nodes[a.0].value.cols();
                    acc(&mut g, nodes, *a, |s| {
                        for (k, x) in s.iter_mut().enumerate() {
                            *x += gout[k / c];
                        }
                    })
                }
                Op::Transpose(a) => {
                    let gt = Tensor::matrix(node.value.rows(), node.value.cols(), gout).transpose();
                    acc(&mut g, nodes, *a, |s| add_into(s, gt.data()))
                }
                Op::ConcatCols(parts) => {
                    let gt = Tensor::matrix(node.value.rows(), node.value.cols(), gout);
                    let mut start = 0;
                    for p in parts {
                        let w = nodes[p.0].value.cols();
                        let piece = gt.slice_cols(start, start + w);
                        acc(&mut g, nodes, *p, |s| add_into(s, piece.data()));
                        start += w;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut start = 0;
                    for p in parts {
                        let n = nodes[p.0].value.numel();
                        acc(&mut g, nodes, *p, |s| add_into(s, &gout[start..start + n]));
                        start += n;
                    }
                }
                Op::SliceCols(a, start) => {
                    let ta = &nodes[a.0].value;
                    let (c, w) = (ta.cols(), node.value.cols());
                    acc(&mut g, nodes, *a, |s| {
                        for r in 0..node.value.rows() {
                            for j in 0..w {
                                s[r * c + start + j] += gout[r * w + j];
                            }
                        }
                    })
                }
                Op::SliceRows(a, start) => {
                    let c = node.value.cols();
                    acc(&mut g, nodes, *a, |s| add_into(&mut s[start * c..start * c + gout.len()], &gout))
                }
                Op::Embedding(table, ids) => {
                    let c = node.value.cols();
                    acc(&mut g, nodes, *table, |s| {
                        for (r, &id) in ids.iter().enumerate() {
                            add_into(&mut s[id * c..(id + 1) * c], &gout[r * c..(r + 1) * c]);
                        }
                    })
                }
                Op::Softmax(a, t) => {
                    let y = &node.value;
                    let c = y.cols();
                    acc(&mut g, nodes, *a, |s| {
                        for r in 0..y.rows() {
                            let yr = y.row(r);
                            let gr = &gout[r * c..(r + 1) * c];
                            let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                            for j in 0..c {
                                s[r * c + j] += yr[j] * (gr[j] - dot) / t;
                            }
                        }
                    })
                }
                Op::LogSoftmax(a, t) => {
                    let y = &node.value;
                    let c = y.cols();
                    acc(&mut g, nodes, *a, |s| {
                        for r in 0..y.rows() {
                            let yr = y.row(r);
                            let gr = &gout[r * c..(r + 1) * c];
                            let total: f64 = gr.iter().sum();
                            for j in 0..c {
                                s[r * c + j] += (gr[j] - yr[j].exp() * total) / t;
                            }
                        }
                    })
                }
                Op::LayerNorm(a, eps) => {
                    let x = &nodes[a.0].value;
                    let y = &node.value;
                    let c = x.cols();
                    acc(&mut g, nodes, *a, |s| {
                        for r in 0..x.rows() {
                            let xr = x.row(r);
                            let mean = xr.iter().sum::<f64>() / c as f64;
                            let var = xr.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / c as f64;
                            let inv = 1.0 / (var + eps).sqrt();
                            let yr = y.row(r);
                            let gr = &gout[r * c..(r + 1) * c];
                            let gm = gr.iter().sum::<f64>() / c as f64;
                            let gy = gr.iter().zip(yr).map(|(p, q)| p * q).sum::<f64>() / c as f64;
                            for j in 0..c {
                                s[r * c + j] += inv * (gr[j] - gm - yr[j] * gy);
                            }
                        }
                    })
                }
                Op::Dropout(a, mask) => acc(&mut g, nodes, *a, |s| {
                    for k in 0..s.len() {
                        s[k] += gout[k] * mask[k];
                    }
                }),
                Op::Pick(a, idx) => {
                    let c = nodes[a.0].value.cols();
                    acc(&mut g, nodes, *a, |s| {
                        for (r, &j) in idx.iter().enumerate() {
                            s[r * c + j] += gout[r];
                        }
                    })
                }
                Op::Clamp(a, lo, hi) => {
                    let x = nodes[a.0].value.data();
                    acc(&mut g, nodes, *a, |s| {
                        for k in 0..s.len() {
                            if x[k] > *lo && x[k] < *hi {
                                s[k] += gout[k];
                            }
                        }
                    })
                }
                Op::Minimum(a, b) => {
                    let (xa, xb) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                    acc(&mut g, nodes, *a, |s| {
                        for k in 0..s.len() {
                            if xa[k] <= xb[k] {
                                s[k] += gout[k];
                            }
                        }
                    });
                    acc(&mut g, nodes, *b, |s| {
                        for k in 0..s.len() {
                            if xa[k] > xb[k] {
                                s[k] += gout[k];
                            }
                        }
                    });
                }
            }
        }
        Ok(())
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}
