//! Dense f64 tensors with a reverse-mode tape, the layer primitives the flow
//! transformer needs, and Adam.
//!
//! Every op treats its operands as 2-D: the last dimension is the column
//! count and all leading dimensions are flattened into rows. Values are
//! recorded on a [`Tape`] in creation order, which is already topological, so
//! [`Tape::backward`] walks the node list in reverse.

use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng as _;

use crate::network::BPR_ALPHA;
use crate::rng::Rng;
use crate::{Error, Result};

pub const LAYERNORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let len: usize = shape.iter().product();
        if shape.is_empty() || len != data.len() {
            return Err(Error::Shape {
                op: "tensor",
                left: shape,
                right: vec![data.len()],
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let len = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: (0..len).map(&mut f).collect(),
        }
    }

    /// Entries drawn from Uniform[-limit, limit].
    pub fn uniform(shape: &[usize], limit: f64, rng: &mut Rng) -> Self {
        Tensor::from_fn(shape, |_| rng.random_range(-limit..=limit))
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

    pub fn cols(&self) -> usize {
        *self.shape.last().unwrap_or(&1)
    }

    pub fn rows(&self) -> usize {
        self.data.len() / self.cols().max(1)
    }

    pub fn reshaped(mut self, shape: &[usize]) -> Result<Self> {
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(Error::Shape {
                op: "reshape",
                left: self.shape,
                right: shape.to_vec(),
            });
        }
        self.shape = shape.to_vec();
        Ok(self)
    }
}

/// C (m×n) = beta·C + A·B where A is m×k and B is k×n; either operand may be
/// stored transposed.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f64], a_t: bool, b: &[f64], b_t: bool, c: &mut [f64], beta: f64) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.iter_mut().for_each(|x| *x *= beta);
        return;
    }
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    // SAFETY: the slices hold at least m·k, k·n and m·n elements and the
    // strides above address exactly those row-major (or transposed) layouts.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Row-oriented sparse linear map: `out[i] = Σ w·x[j]` over `rows[i]`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SparseRows {
    pub width: usize,
    pub rows: Vec<Vec<(usize, f64)>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Concat(Vec<Var>),
    Reshape(Var),
    Softmax(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    Relu(Var),
    Sigmoid(Var),
    Abs(Var),
    Dropout(Var, Vec<f64>),
    SumLast(Var),
    Sum(Var),
    Mse(Var, Var),
    Sparse(Var, Arc<SparseRows>),
    Bpr { v: Var, t0: Arc<Vec<f64>>, cap: Arc<Vec<f64>> },
    GroupMin { x: Var, argmin: Vec<Option<usize>> },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records a forward computation for one backward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar with respect to every node that required one.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<f64>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::Shape {
        op,
        left: a.shape.clone(),
        right: b.shape.clone(),
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + libm::exp(-x))
    } else {
        let e = libm::exp(x);
        e / (1.0 + e)
    }
}

fn add_into(dst: &mut Option<Vec<f64>>, src: &[f64]) {
    match dst {
        Some(d) => d.iter_mut().zip(src).for_each(|(a, b)| *a += b),
        None => *dst = Some(src.to_vec()),
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
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

    /// A trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf that receives no gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// (rows×k)·(k×n).
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if tb.shape.len() != 2 || ta.cols() != tb.shape[0] {
            return Err(shape_err("matmul", ta, tb));
        }
        let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, &ta.data, false, &tb.data, false, &mut out, 0.0);
        let mut shape = ta.shape.clone();
        *shape.last_mut().unwrap() = n;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor { shape, data: out }, Op::MatMul(a, b), rg))
    }

    /// (m×d)·(n×d)ᵀ, the attention score product.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.cols() != tb.cols() {
            return Err(shape_err("matmul_nt", ta, tb));
        }
        let (m, k, n) = (ta.rows(), ta.cols(), tb.rows());
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, &ta.data, false, &tb.data, true, &mut out, 0.0);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor { shape: vec![m, n], data: out }, Op::MatMulNt(a, b), rg))
    }

    fn check_broadcast(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (ta, tb) = (self.value(a), self.value(b));
        let suffix = tb.shape.len() <= ta.shape.len() && ta.shape.ends_with(&tb.shape);
        let row = tb.len() == ta.cols() && tb.shape.iter().rev().skip(1).all(|&d| d == 1);
        if suffix || row {
            Ok(())
        } else {
            Err(shape_err(op, ta, tb))
        }
    }

    /// `a + b`; `b` may match a trailing part of `a`'s shape and is then
    /// repeated over the leading dimensions.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_broadcast("add", a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let w = tb.len();
        let data = ta.data.iter().enumerate().map(|(i, x)| x + tb.data[i % w]).collect();
        let shape = ta.shape.clone();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor { shape, data }, Op::Add(a, b), rg))
    }

    /// `a − b` with the same broadcasting as [`Tape::add`].
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_broadcast("sub", a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let w = tb.len();
        let data = ta.data.iter().enumerate().map(|(i, x)| x - tb.data[i % w]).collect();
        let shape = ta.shape.clone();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor { shape, data }, Op::Sub(a, b), rg))
    }

    /// Elementwise product, same broadcasting as [`Tape::add`].
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_broadcast("mul", a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let w = tb.len();
        let data = ta.data.iter().enumerate().map(|(i, x)| x * tb.data[i % w]).collect();
        let shape = ta.shape.clone();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor { shape, data }, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let t = self.value(a);
        let data = t.data.iter().map(|x| x * c).collect();
        let shape = t.shape.clone();
        let rg = self.rg(a);
        self.push(Tensor { shape, data }, Op::Scale(a, c), rg)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let t = self.value(a);
        let data = t.data.iter().map(|x| x + c).collect();
        let shape = t.shape.clone();
        let rg = self.rg(a);
        self.push(Tensor { shape, data }, Op::AddScalar(a), rg)
    }

    pub fn concat_last_dim(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::Contract("concat of nothing".into()))?;
        let rows = self.value(*first).rows();
        for p in parts {
            if self.value(*p).rows() != rows {
                return Err(shape_err("concat_last_dim", self.value(*first), self.value(*p)));
            }
        }
        let widths: Vec<usize> = parts.iter().map(|p| self.value(*p).cols()).collect();
        let total: usize = widths.iter().sum();
        let mut data = vec![0.0; rows * total];
        let mut off = 0;
        for (p, &w) in parts.iter().zip(&widths) {
            let src = &self.value(*p).data;
            for r in 0..rows {
                data[r * total + off..r * total + off + w].copy_from_slice(&src[r * w..(r + 1) * w]);
            }
            off += w;
        }
        let mut shape = self.value(*first).shape.clone();
        *shape.last_mut().unwrap() = total;
        let rg = parts.iter().any(|p| self.rg(*p));
        Ok(self.push(Tensor { shape, data }, Op::Concat(parts.to_vec()), rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).clone().reshaped(shape)?;
        let rg = self.rg(a);
        Ok(self.push(t, Op::Reshape(a), rg))
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_lastdim(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let c = t.cols();
        let mut data = t.data.clone();
        for row in data.chunks_mut(c) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for x in row.iter_mut() {
                *x = libm::exp(*x - max);
                sum += *x;
            }
            row.iter_mut().for_each(|x| *x /= sum);
        }
        let shape = t.shape.clone();
        let rg = self.rg(a);
        self.push(Tensor { shape, data }, Op::Softmax(a), rg)
    }

    /// Per-row standardization over the last dimension, then `gain·x̂ + bias`.
    pub fn layernorm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (tx, tg, tb) = (self.value(x), self.value(gain), self.value(bias));
        let c = tx.cols();
        if tg.len() != c || tb.len() != c {
            return Err(shape_err("layernorm", tx, tg));
        }
        let rows = tx.rows();
        let mut xhat = vec![0.0; tx.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; tx.len()];
        for r in 0..rows {
            let row = &tx.data[r * c..(r + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let is = 1.0 / libm::sqrt(var + LAYERNORM_EPS);
            inv_std[r] = is;
            for j in 0..c {
                let h = (row[j] - mean) * is;
                xhat[r * c + j] = h;
                out[r * c + j] = tg.data[j] * h + tb.data[j];
            }
        }
        let shape = tx.shape.clone();
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        Ok(self.push(
            Tensor { shape, data: out },
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let data = t.data.iter().map(|&x| if x > 0.0 { x } else { 0.0 }).collect();
        let shape = t.shape.clone();
        let rg = self.rg(a);
        self.push(Tensor { shape, data }, Op::Relu(a), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let data = t.data.iter().map(|&x| sigmoid(x)).collect();
        let shape = t.shape.clone();
        let rg = self.rg(a);
        self.push(Tensor { shape, data }, Op::Sigmoid(a), rg)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let data = t.data.iter().map(|x| x.abs()).collect();
        let shape = t.shape.clone();
        let rg = self.rg(a);
        self.push(Tensor { shape, data }, Op::Abs(a), rg)
    }

    /// Inverted dropout. Identity when `training` is false or `rate` is 0.
    pub fn dropout(&mut self, a: Var, rate: f64, training: bool, rng: &mut Rng) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Config("dropout rate must be in [0, 1)".into()));
        }
        if !training || rate == 0.0 {
            return Ok(a);
        }
        let keep = 1.0 / (1.0 - rate);
        let t = self.value(a);
        let mask: Vec<f64> = (0..t.len())
            .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
            .collect();
        let data = t.data.iter().zip(&mask).map(|(x, m)| x * m).collect();
        let shape = t.shape.clone();
        let rg = self.rg(a);
        Ok(self.push(Tensor { shape, data }, Op::Dropout(a, mask), rg))
    }

    /// Sums each row, giving shape (..., 1).
    pub fn sum_lastdim(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let data = t.data.chunks(t.cols().max(1)).map(|r| r.iter().sum()).collect();
        let mut shape = t.shape.clone();
        *shape.last_mut().unwrap() = 1;
        let rg = self.rg(a);
        self.push(Tensor { shape, data }, Op::SumLast(a), rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data.iter().sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len().max(1) as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Mean of squared differences over all elements.
    pub fn mse_loss(&mut self, pred: Var, target: Var) -> Result<Var> {
        let (tp, tt) = (self.value(pred), self.value(target));
        if tp.shape != tt.shape {
            return Err(shape_err("mse_loss", tp, tt));
        }
        let n = tp.len().max(1) as f64;
        let s = tp.data.iter().zip(&tt.data).map(|(p, t)| (p - t) * (p - t)).sum::<f64>() / n;
        let rg = self.rg(pred) || self.rg(target);
        Ok(self.push(Tensor::scalar(s), Op::Mse(pred, target), rg))
    }

    /// Applies a sparse linear map to the flattened input.
    pub fn sparse_map(&mut self, a: Var, map: Arc<SparseRows>) -> Result<Var> {
        let t = self.value(a);
        if t.len() != map.width || map.rows.iter().flatten().any(|&(j, _)| j >= map.width) {
            return Err(Error::Shape {
                op: "sparse_map",
                left: t.shape.clone(),
                right: vec![map.width],
            });
        }
        let data: Vec<f64> = map.rows.iter().map(|r| r.iter().map(|&(j, w)| w * t.data[j]).sum()).collect();
        let shape = vec![data.len()];
        let rg = self.rg(a);
        Ok(self.push(Tensor { shape, data }, Op::Sparse(a, map), rg))
    }

    /// BPR link travel time `t0·(1 + 0.15·(v/C)⁴)` for a vector of link flows.
    pub fn bpr(&mut self, v: Var, t0: Arc<Vec<f64>>, cap: Arc<Vec<f64>>) -> Result<Var> {
        let t = self.value(v);
        if t.len() != t0.len() || t.len() != cap.len() {
            return Err(Error::Shape {
                op: "bpr",
                left: t.shape.clone(),
                right: vec![t0.len()],
            });
        }
        let data = t
            .data
            .iter()
            .zip(t0.iter().zip(cap.iter()))
            .map(|(&x, (&t0, &c))| t0 * (1.0 + BPR_ALPHA * libm::pow(x / c, 4.0)))
            .collect();
        let shape = t.shape.clone();
        let rg = self.rg(v);
        Ok(self.push(Tensor { shape, data }, Op::Bpr { v, t0, cap }, rg))
    }

    /// Row-wise minimum over entries whose `valid` flag is set; rows with no
    /// valid entry give 0. The gradient goes to the first minimizer.
    pub fn group_min(&mut self, a: Var, valid: &[bool]) -> Result<Var> {
        let t = self.value(a);
        if valid.len() != t.len() {
            return Err(Error::Shape {
                op: "group_min",
                left: t.shape.clone(),
                right: vec![valid.len()],
            });
        }
        let c = t.cols();
        let mut data = Vec::with_capacity(t.rows());
        let mut argmin = Vec::with_capacity(t.rows());
        for (r, row) in t.data.chunks(c).enumerate() {
            let mut best: Option<usize> = None;
            for j in 0..c {
                if valid[r * c + j] && best.is_none_or(|b| row[j] < row[b]) {
                    best = Some(j);
                }
            }
            data.push(best.map_or(0.0, |b| row[b]));
            argmin.push(best.map(|b| r * c + b));
        }
        let mut shape = t.shape.clone();
        *shape.last_mut().unwrap() = 1;
        let rg = self.rg(a);
        Ok(self.push(Tensor { shape, data }, Op::GroupMin { x: a, argmin }, rg))
    }

    /// Reverse pass from a scalar. Consumes the tape.
    pub fn backward(self, loss: Var) -> Result<Gradients> {
        let mut nodes = self.nodes;
        if nodes[loss.0].value.len() != 1 {
            return Err(Error::Contract("backward needs a scalar loss".into()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if matches!(nodes[i].op, Op::Leaf) {
                grads[i] = Some(g);
                continue;
            }
            let op = core::mem::replace(&mut nodes[i].op, Op::Leaf);
            let out = &nodes[i].value;
            let val = |v: Var| &nodes[v.0].value;
            let wants = |v: Var| nodes[v.0].requires_grad;
            match &op {
                Op::Leaf => unreachable!(),
                Op::MatMul(a, b) => {
                    let (ta, tb) = (val(*a), val(*b));
                    let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                    if wants(*a) {
                        let mut d = vec![0.0; m * k];
                        gemm(m, n, k, &g, false, &tb.data, true, &mut d, 0.0);
                        add_into(&mut grads[a.0], &d);
                    }
                    if wants(*b) {
                        let mut d = vec![0.0; k * n];
                        gemm(k, m, n, &ta.data, true, &g, false, &mut d, 0.0);
                        add_into(&mut grads[b.0], &d);
                    }
                }
                Op::MatMulNt(a, b) => {
                    let (ta, tb) = (val(*a), val(*b));
                    let (m, k, n) = (ta.rows(), ta.cols(), tb.rows());
                    if wants(*a) {
                        let mut d = vec![0.0; m * k];
                        gemm(m, n, k, &g, false, &tb.data, false, &mut d, 0.0);
                        add_into(&mut grads[a.0], &d);
                    }
                    if wants(*b) {
                        let mut d = vec![0.0; n * k];
                        gemm(n, m, k, &g, true, &ta.data, false, &mut d, 0.0);
                        add_into(&mut grads[b.0], &d);
                    }
                }
                Op::Add(a, b) | Op::Sub(a, b) => {
                    let sign = if matches!(op, Op::Sub(..)) { -1.0 } else { 1.0 };
                    if wants(*a) {
                        add_into(&mut grads[a.0], &g);
                    }
                    if wants(*b) {
                        let w = val(*b).len();
                        let mut d = vec![0.0; w];
                        for (j, x) in g.iter().enumerate() {
                            d[j % w] += sign * x;
                        }
                        add_into(&mut grads[b.0], &d);
                    }
                }
                Op::Mul(a, b) => {
                    let (ta, tb) = (val(*a), val(*b));
                    let w = tb.len();
                    if wants(*a) {
                        let d: Vec<f64> = g.iter().enumerate().map(|(j, x)| x * tb.data[j % w]).collect();
                        add_into(&mut grads[a.0], &d);
                    }
                    if wants(*b) {
                        let mut d = vec![0.0; w];
                        for (j, x) in g.iter().enumerate() {
                            d[j % w] += x * ta.data[j];
                        }
                        add_into(&mut grads[b.0], &d);
                    }
                }
                Op::Scale(a, c) => {
                    let d: Vec<f64> = g.iter().map(|x| x * c).collect();
                    add_into(&mut grads[a.0], &d);
                }
                Op::AddScalar(a) | Op::Reshape(a) => add_into(&mut grads[a.0], &g),
                Op::Concat(parts) => {
                    let total = out.cols();
                    let rows = out.rows();
                    let mut off = 0;
                    for p in parts {
                        let w = val(*p).cols();
                        if wants(*p) {
                            let mut d = vec![0.0; rows * w];
                            for r in 0..rows {
                                d[r * w..(r + 1) * w].copy_from_slice(&g[r * total + off..r * total + off + w]);
                            }
                            add_into(&mut grads[p.0], &d);
                        }
                        off += w;
                    }
                }
                Op::Softmax(a) => {
                    let c = out.cols();
                    let mut d = vec![0.0; g.len()];
                    for ((dr, yr), gr) in d.chunks_mut(c).zip(out.data.chunks(c)).zip(g.chunks(c)) {
                        let dot: f64 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                        for j in 0..c {
                            dr[j] = yr[j] * (gr[j] - dot);
                        }
                    }
                    add_into(&mut grads[a.0], &d);
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    xhat,
                    inv_std,
                } => {
                    let c = out.cols();
                    let tg = &val(*gain).data;
                    if wants(*gain) {
                        let mut d = vec![0.0; c];
                        for (j, (gv, h)) in g.iter().zip(xhat).enumerate() {
                            d[j % c] += gv * h;
                        }
                        add_into(&mut grads[gain.0], &d);
                    }
                    if wants(*bias) {
                        let mut d = vec![0.0; c];
                        for (j, gv) in g.iter().enumerate() {
                            d[j % c] += gv;
                        }
                        add_into(&mut grads[bias.0], &d);
                    }
                    if wants(*x) {
                        let mut d = vec![0.0; g.len()];
                        for (r, is) in inv_std.iter().enumerate() {
                            let gr = &g[r * c..(r + 1) * c];
                            let hr = &xhat[r * c..(r + 1) * c];
                            let mut m1 = 0.0;
                            let mut m2 = 0.0;
                            for j in 0..c {
                                let dh = gr[j] * tg[j];
                                m1 += dh;
                                m2 += dh * hr[j];
                            }
                            m1 /= c as f64;
                            m2 /= c as f64;
                            for j in 0..c {
                                d[r * c + j] = is * (gr[j] * tg[j] - m1 - hr[j] * m2);
                            }
                        }
                        add_into(&mut grads[x.0], &d);
                    }
                }
                Op::Relu(a) => {
                    let d: Vec<f64> = g.iter().zip(&out.data).map(|(g, y)| if *y > 0.0 { *g } else { 0.0 }).collect();
                    add_into(&mut grads[a.0], &d);
                }
                Op::Sigmoid(a) => {
                    let d: Vec<f64> = g.iter().zip(&out.data).map(|(g, y)| g * y * (1.0 - y)).collect();
                    add_into(&mut grads[a.0], &d);
                }
                Op::Abs(a) => {
                    let d: Vec<f64> = g
                        .iter()
                        .zip(&val(*a).data)
                        .map(|(g, x)| if *x > 0.0 { *g } else if *x < 0.0 { -*g } else { 0.0 })
                        .collect();
                    add_into(&mut grads[a.0], &d);
                }
                Op::Dropout(a, mask) => {
                    let d: Vec<f64> = g.iter().zip(mask).map(|(g, m)| g * m).collect();
                    add_into(&mut grads[a.0], &d);
                }
                Op::SumLast(a) => {
                    let c = val(*a).cols();
                    let d: Vec<f64> = (0..val(*a).len()).map(|j| g[j / c]).collect();
                    add_into(&mut grads[a.0], &d);
                }
                Op::Sum(a) => {
                    let d = vec![g[0]; val(*a).len()];
                    add_into(&mut grads[a.0], &d);
                }
                Op::Mse(p, t) => {
                    let (tp, tt) = (val(*p), val(*t));
                    let n = tp.len().max(1) as f64;
                    let d: Vec<f64> = tp.data.iter().zip(&tt.data).map(|(p, t)| 2.0 * (p - t) / n * g[0]).collect();
                    if wants(*p) {
                        add_into(&mut grads[p.0], &d);
                    }
                    if wants(*t) {
                        let neg: Vec<f64> = d.iter().map(|x| -x).collect();
                        add_into(&mut grads[t.0], &neg);
                    }
                }
                Op::Sparse(a, map) => {
                    let mut d = vec![0.0; map.width];
                    for (row, gv) in map.rows.iter().zip(&g) {
                        for &(j, w) in row {
                            d[j] += w * gv;
                        }
                    }
                    add_into(&mut grads[a.0], &d);
                }
                Op::Bpr { v, t0, cap } => {
                    let d: Vec<f64> = val(*v)
                        .data
                        .iter()
                        .enumerate()
                        .map(|(j, &x)| g[j] * t0[j] * 4.0 * BPR_ALPHA * libm::pow(x, 3.0) / libm::pow(cap[j], 4.0))
                        .collect();
                    add_into(&mut grads[v.0], &d);
                }
                Op::GroupMin { x, argmin } => {
                    let mut d = vec![0.0; val(*x).len()];
                    for (gv, am) in g.iter().zip(argmin) {
                        if let Some(j) = am {
                            d[*j] += gv;
                        }
                    }
                    add_into(&mut grads[x.0], &d);
                }
            }
        }
        for (i, n) in nodes.iter().enumerate() {
            if !matches!(n.op, Op::Leaf) || !n.requires_grad {
                grads[i] = None;
            }
        }
        Ok(Gradients { grads })
    }
}

/// Named trainable tensors in a fixed order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore {
    names: Vec<alloc::string::String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn push(&mut self, name: impl Into<alloc::string::String>, t: Tensor) -> usize {
        self.names.push(name.into());
        self.tensors.push(t);
        self.tensors.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[alloc::string::String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn get(&self, i: usize) -> &Tensor {
        &self.tensors[i]
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Puts every parameter on the tape as a trainable leaf.
    pub fn load(&self, tape: &mut Tape) -> Vec<Var> {
        self.tensors.iter().map(|t| tape.param(t.clone())).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(params: &ParamStore, lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: params.tensors.iter().map(|t| vec![0.0; t.len()]).collect(),
            v: params.tensors.iter().map(|t| vec![0.0; t.len()]).collect(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One bias-corrected update. `grads[i]` must match parameter `i`.
    pub fn step(&mut self, params: &mut ParamStore, grads: &[Option<Vec<f64>>]) -> Result<()> {
        if grads.len() != params.len() {
            return Err(Error::Contract("one gradient per parameter required".into()));
        }
        for (i, g) in grads.iter().enumerate() {
            match g {
                Some(g) if g.len() == params.tensors[i].len() => {}
                _ => {
                    return Err(Error::Contract(alloc::format!(
                        "missing gradient for parameter `{}`",
                        params.names[i]
                    )))
                }
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - libm::pow(self.beta1, t as f64);
        let c2 = 1.0 - libm::pow(self.beta2, t as f64);
        for (i, g) in grads.iter().enumerate() {
            let g = g.as_ref().unwrap();
            let p = &mut params.tensors[i].data;
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for j in 0..g.len() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                let mh = m[j] / c1;
                let vh = v[j] / c2;
                p[j] -= self.lr * mh / (libm::sqrt(vh) + self.eps);
            }
        }
        Ok(())
    }
}
