//! Reverse-mode differentiation over a linear tape of tensor operations.
//!
//! A [`Graph`] records every primitive applied during a forward pass. Calling
//! [`Graph::backward`] on a scalar node replays the tape in reverse and
//! accumulates vector-Jacobian products into every node that requires a
//! gradient. Graphs are cheap, single-use and single-threaded; parallel batch
//! evaluation builds one graph per example.

use std::collections::HashMap;

use super::real::Real;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    MatMul { a: Var, b: Var, trans_b: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, T),
    Abs(Var),
    Square(Var),
    Sum(Var),
    Mean(Var),
    Softmax(Var),
    CausalSoftmax(Var),
    LogSoftmax(Var),
    LayerNorm(Var, Vec<T>),
    Gelu(Var),
    Relu(Var),
    Sigmoid(Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        stride: (usize, usize),
        pad: (usize, usize),
    },
    DepthwiseConv1d {
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        pad: usize,
    },
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    Transpose(Var),
    SwapAxes01(Var),
    Reshape(Var),
    GatherRows(Var, Vec<usize>),
    Pick(Var, Vec<usize>),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    params: HashMap<usize, Var>,
    grad_enabled: bool,
}

/// Leaf gradients produced by [`Graph::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn wrt(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

fn shape_err(op: &'static str, a: &[usize], b: &[usize]) -> Error {
    Error::ShapeMismatch {
        op,
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    }
}

fn dims2(op: &'static str, shape: &[usize]) -> Result<(usize, usize)> {
    match *shape {
        [r, c] => Ok((r, c)),
        _ => Err(Error::invalid(format!(
            "{op}: expected a rank-2 operand, got {shape:?}"
        ))),
    }
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_C: f64 = 0.044_715;

fn gelu<T: Real>(x: T) -> T {
    let u = T::c(GELU_K) * (x + T::c(GELU_C) * x * x * x);
    T::c(0.5) * x * (T::one() + u.tanh())
}

fn gelu_grad<T: Real>(x: T) -> T {
    let u = T::c(GELU_K) * (x + T::c(GELU_C) * x * x * x);
    let t = u.tanh();
    let du = T::c(GELU_K) * (T::one() + T::c(3.0 * GELU_C) * x * x);
    T::c(0.5) * (T::one() + t) + T::c(0.5) * x * (T::one() - t * t) * du
}

fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Row-wise softmax over the first `limit(row)` columns; the rest are zero.
fn softmax_rows<T: Real>(x: &[T], rows: usize, cols: usize, limit: impl Fn(usize) -> usize) -> Vec<T> {
    let mut out = vec![T::zero(); rows * cols];
    for r in 0..rows {
        let n = limit(r).min(cols);
        if n == 0 {
            continue;
        }
        let src = &x[r * cols..r * cols + n];
        let dst = &mut out[r * cols..r * cols + n];
        let m = src.iter().copied().fold(T::neg_infinity(), T::max);
        let mut z = T::zero();
        for (d, &s) in dst.iter_mut().zip(src) {
            *d = (s - m).exp();
            z = z + *d;
        }
        for d in dst.iter_mut() {
            *d = *d / z;
        }
    }
    out
}

fn same_pad(len: usize, k: usize, stride: usize) -> (usize, usize) {
    let out = len.div_ceil(stride);
    let total = ((out.saturating_sub(1)) * stride + k).saturating_sub(len);
    (out, total / 2)
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: HashMap::new(),
            grad_enabled: true,
        }
    }

    /// A graph that records values only; nothing requires a gradient.
    pub fn inference() -> Self {
        Self {
            grad_enabled: false,
            ..Self::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite { op: "leaf" });
        }
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: requires_grad && self.grad_enabled,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Differentiable input leaf.
    pub fn input(&mut self, value: Tensor<T>) -> Result<Var> {
        self.leaf(value, true)
    }

    /// Non-differentiable leaf.
    pub fn constant(&mut self, value: Tensor<T>) -> Result<Var> {
        self.leaf(value, false)
    }

    /// Leaf for parameter `id`; repeated calls return the same node.
    pub fn param(&mut self, id: usize, value: &Tensor<T>) -> Result<Var> {
        if let Some(&v) = self.params.get(&id) {
            return Ok(v);
        }
        let v = self.leaf(value.clone(), true)?;
        self.params.insert(id, v);
        Ok(v)
    }

    /// Uses an existing node as parameter `id`, so later [`Graph::param`]
    /// calls return it. Lets gradient checks perturb parameters.
    pub fn bind_param(&mut self, id: usize, v: Var) -> Result<()> {
        if self.params.contains_key(&id) {
            return Err(Error::invalid(format!("parameter {id} is already bound")));
        }
        self.params.insert(id, v);
        Ok(())
    }

    /// `(param id, node)` pairs registered on this graph.
    pub fn param_vars(&self) -> impl Iterator<Item = (usize, Var)> + '_ {
        self.params.iter().map(|(&id, &v)| (id, v))
    }

    fn push(&mut self, op_name: &'static str, value: Tensor<T>, op: Op<T>, parents: &[Var]) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite { op: op_name });
        }
        let requires_grad = self.grad_enabled && parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn data(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }

    // ---------------------------------------------------------------- linear

    /// `a @ b` for `a: [m, k]`, `b: [k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a @ b^T` for `a: [m, k]`, `b: [n, k]`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (m, k) = dims2("matmul", self.shape(a))?;
        let (br, bc) = dims2("matmul", self.shape(b))?;
        let (kb, n) = if trans_b { (bc, br) } else { (br, bc) };
        if k != kb {
            return Err(shape_err("matmul", self.shape(a), self.shape(b)));
        }
        let mut out = vec![T::zero(); m * n];
        let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
        T::gemm(
            m,
            k,
            n,
            T::one(),
            self.data(a),
            k as isize,
            1,
            self.data(b),
            rsb,
            csb,
            T::zero(),
            &mut out,
            n as isize,
            1,
        );
        self.push("matmul", Tensor::from_parts(vec![m, n], out), Op::MatMul { a, b, trans_b }, &[a, b])
    }

    // ----------------------------------------------------------- elementwise

    fn zip_same(&mut self, op_name: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T, op: Op<T>) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(op_name, self.shape(a), self.shape(b)));
        }
        let out: Vec<T> = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| f(x, y)).collect();
        let shape = self.shape(a).to_vec();
        self.push(op_name, Tensor::from_parts(shape, out), op, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    fn row_broadcast(&mut self, op_name: &'static str, a: Var, r: Var, f: impl Fn(T, T) -> T, op: Op<T>) -> Result<Var> {
        let (rows, cols) = dims2(op_name, self.shape(a))?;
        if self.shape(r) != [cols] {
            return Err(shape_err(op_name, self.shape(a), self.shape(r)));
        }
        let rv = self.data(r);
        let mut out = Vec::with_capacity(rows * cols);
        for row in self.data(a).chunks_exact(cols.max(1)).take(rows) {
            out.extend(row.iter().zip(rv).map(|(&x, &y)| f(x, y)));
        }
        self.push(op_name, Tensor::from_parts(vec![rows, cols], out), op, &[a, r])
    }

    /// `a[i, j] + bias[j]`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        self.row_broadcast("add_row", a, bias, |x, y| x + y, Op::AddRow(a, bias))
    }

    /// `a[i, j] * gain[j]`.
    pub fn mul_row(&mut self, a: Var, gain: Var) -> Result<Var> {
        self.row_broadcast("mul_row", a, gain, |x, y| x * y, Op::MulRow(a, gain))
    }

    fn unary(&mut self, op_name: &'static str, a: Var, f: impl Fn(T) -> T, op: Op<T>) -> Result<Var> {
        let value = self.nodes[a.0].value.map(f);
        self.push(op_name, value, op, &[a])
    }

    pub fn scale(&mut self, a: Var, c: T) -> Result<Var> {
        self.unary("scale", a, |x| x * c, Op::Scale(a, c))
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        self.unary("abs", a, |x| x.abs(), Op::Abs(a))
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.unary("square", a, |x| x * x, Op::Square(a))
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        self.unary("gelu", a, gelu, Op::Gelu(a))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary("relu", a, |x| x.max(T::zero()), Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary("sigmoid", a, sigmoid, Op::Sigmoid(a))
    }

    // ------------------------------------------------------------ reductions

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.nodes[a.0].value.sum_all();
        self.push("sum", Tensor::scalar(s), Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = &self.nodes[a.0].value;
        if t.numel() == 0 {
            return Err(Error::invalid("mean of an empty tensor"));
        }
        let s = t.sum_all() / T::c(t.numel() as f64);
        self.push("mean", Tensor::scalar(s), Op::Mean(a), &[a])
    }

    /// Row-wise softmax of a rank-2 tensor.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let (r, c) = dims2("softmax", self.shape(a))?;
        let out = softmax_rows(self.data(a), r, c, |_| c);
        self.push("softmax", Tensor::from_parts(vec![r, c], out), Op::Softmax(a), &[a])
    }

    /// Row-wise softmax where row `i` only sees columns `0..=i + offset`;
    /// masked entries are exactly zero.
    pub fn causal_softmax(&mut self, a: Var, offset: usize) -> Result<Var> {
        let (r, c) = dims2("causal_softmax", self.shape(a))?;
        let out = softmax_rows(self.data(a), r, c, |i| i + offset + 1);
        self.push(
            "causal_softmax",
            Tensor::from_parts(vec![r, c], out),
            Op::CausalSoftmax(a),
            &[a],
        )
    }

    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let (r, c) = dims2("log_softmax", self.shape(a))?;
        let x = self.data(a);
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            let row = &x[i * c..(i + 1) * c];
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = m + row.iter().fold(T::zero(), |acc, &v| acc + (v - m).exp()).ln();
            for (o, &v) in out[i * c..(i + 1) * c].iter_mut().zip(row) {
                *o = v - lse;
            }
        }
        self.push("log_softmax", Tensor::from_parts(vec![r, c], out), Op::LogSoftmax(a), &[a])
    }

    /// Row-wise normalisation to zero mean and unit variance (no affine part).
    pub fn layer_norm(&mut self, a: Var, eps: f64) -> Result<Var> {
        let (r, c) = dims2("layer_norm", self.shape(a))?;
        let x = self.data(a);
        let mut out = vec![T::zero(); r * c];
        let mut rstd = Vec::with_capacity(r);
        let n = T::c(c as f64);
        for i in 0..r {
            let row = &x[i * c..(i + 1) * c];
            let mu = row.iter().fold(T::zero(), |acc, &v| acc + v) / n;
            let var = row.iter().fold(T::zero(), |acc, &v| acc + (v - mu) * (v - mu)) / n;
            let rs = T::one() / (var + T::c(eps)).sqrt();
            for (o, &v) in out[i * c..(i + 1) * c].iter_mut().zip(row) {
                *o = (v - mu) * rs;
            }
            rstd.push(rs);
        }
        self.push("layer_norm", Tensor::from_parts(vec![r, c], out), Op::LayerNorm(a, rstd), &[a])
    }

    // ----------------------------------------------------------- convolution

    /// 2-D convolution with "same" padding.
    /// `x: [c_in, h, w]`, `w: [c_out, c_in, kh, kw]`, `b: [c_out]` → `[c_out, ceil(h/sh), ceil(w/sw)]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: (usize, usize)) -> Result<Var> {
        let (ci, h, wd) = match *self.shape(x) {
            [a, b, c] => (a, b, c),
            ref s => return Err(Error::invalid(format!("conv2d: expected [c, h, w] input, got {s:?}"))),
        };
        let (co, wci, kh, kw) = match *self.shape(w) {
            [a, b, c, d] => (a, b, c, d),
            ref s => return Err(Error::invalid(format!("conv2d: expected rank-4 kernel, got {s:?}"))),
        };
        if wci != ci || self.shape(b) != [co] {
            return Err(shape_err("conv2d", self.shape(x), self.shape(w)));
        }
        if stride.0 == 0 || stride.1 == 0 {
            return Err(Error::invalid("conv2d: stride must be positive"));
        }
        let (oh, ph) = same_pad(h, kh, stride.0);
        let (ow, pw) = same_pad(wd, kw, stride.1);
        let xs = self.data(x);
        let ws = self.data(w);
        let bs = self.data(b);
        let mut out = vec![T::zero(); co * oh * ow];
        for o in 0..co {
            for i in 0..oh {
                for j in 0..ow {
                    let mut acc = bs[o];
                    for c in 0..ci {
                        for di in 0..kh {
                            let yi = (i * stride.0 + di) as isize - ph as isize;
                            if yi < 0 || yi >= h as isize {
                                continue;
                            }
                            for dj in 0..kw {
                                let xj = (j * stride.1 + dj) as isize - pw as isize;
                                if xj < 0 || xj >= wd as isize {
                                    continue;
                                }
                                acc = acc
                                    + ws[((o * ci + c) * kh + di) * kw + dj]
                                        * xs[(c * h + yi as usize) * wd + xj as usize];
                            }
                        }
                    }
                    out[(o * oh + i) * ow + j] = acc;
                }
            }
        }
        self.push(
            "conv2d",
            Tensor::from_parts(vec![co, oh, ow], out),
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad: (ph, pw),
            },
            &[x, w, b],
        )
    }

    /// Depthwise 1-D convolution along time with "same" padding.
    /// `x: [t, c]`, `w: [c, k]`, `b: [c]` → `[ceil(t/stride), c]`.
    pub fn depthwise_conv1d(&mut self, x: Var, w: Var, b: Var, stride: usize) -> Result<Var> {
        let (t, c) = dims2("depthwise_conv1d", self.shape(x))?;
        let (wc, k) = dims2("depthwise_conv1d", self.shape(w))?;
        if wc != c || self.shape(b) != [c] {
            return Err(shape_err("depthwise_conv1d", self.shape(x), self.shape(w)));
        }
        if stride == 0 {
            return Err(Error::invalid("depthwise_conv1d: stride must be positive"));
        }
        let (ot, pad) = same_pad(t, k, stride);
        let xs = self.data(x);
        let ws = self.data(w);
        let bs = self.data(b);
        let mut out = vec![T::zero(); ot * c];
        for i in 0..ot {
            for ch in 0..c {
                let mut acc = bs[ch];
                for d in 0..k {
                    let ti = (i * stride + d) as isize - pad as isize;
                    if ti >= 0 && (ti as usize) < t {
                        acc = acc + ws[ch * k + d] * xs[ti as usize * c + ch];
                    }
                }
                out[i * c + ch] = acc;
            }
        }
        self.push(
            "depthwise_conv1d",
            Tensor::from_parts(vec![ot, c], out),
            Op::DepthwiseConv1d { x, w, b, stride, pad },
            &[x, w, b],
        )
    }

    // ---------------------------------------------------------------- layout

    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let value = self.nodes[a.0].value.slice_rows(start, end)?;
        self.push("slice_rows", value, Op::SliceRows(a, start), &[a])
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let (r, c) = dims2("slice_cols", self.shape(a))?;
        if start > end || end > c {
            return Err(Error::invalid(format!(
                "slice_cols: range {start}..{end} out of bounds for {c} columns"
            )));
        }
        let x = self.data(a);
        let w = end - start;
        let mut out = Vec::with_capacity(r * w);
        for i in 0..r {
            out.extend_from_slice(&x[i * c + start..i * c + end]);
        }
        self.push("slice_cols", Tensor::from_parts(vec![r, w], out), Op::SliceCols(a, start), &[a])
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let tensors: Vec<&Tensor<T>> = parts.iter().map(|p| &self.nodes[p.0].value).collect();
        let value = Tensor::concat_rows(&tensors)?;
        self.push("concat_rows", value, Op::ConcatRows(parts.to_vec()), parts)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::invalid("concat_cols of nothing"))?;
        let (rows, _) = dims2("concat_cols", self.shape(*first))?;
        let mut total = 0;
        for p in parts {
            let (r, c) = dims2("concat_cols", self.shape(*p))?;
            if r != rows {
                return Err(shape_err("concat_cols", self.shape(*first), self.shape(*p)));
            }
            total += c;
        }
        let mut out = Vec::with_capacity(rows * total);
        for i in 0..rows {
            for p in parts {
                let c = self.shape(*p)[1];
                out.extend_from_slice(&self.data(*p)[i * c..(i + 1) * c]);
            }
        }
        self.push("concat_cols", Tensor::from_parts(vec![rows, total], out), Op::ConcatCols(parts.to_vec()), parts)
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (r, c) = dims2("transpose", self.shape(a))?;
        let x = self.data(a);
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = x[i * c + j];
            }
        }
        self.push("transpose", Tensor::from_parts(vec![c, r], out), Op::Transpose(a), &[a])
    }

    /// `[a, b, c]` → `[b, a, c]`.
    pub fn swap_axes01(&mut self, a: Var) -> Result<Var> {
        let (d0, d1, d2) = match *self.shape(a) {
            [x, y, z] => (x, y, z),
            ref s => return Err(Error::invalid(format!("swap_axes01: expected rank 3, got {s:?}"))),
        };
        let x = self.data(a);
        let mut out = vec![T::zero(); d0 * d1 * d2];
        for i in 0..d0 {
            for j in 0..d1 {
                out[(j * d0 + i) * d2..(j * d0 + i + 1) * d2].copy_from_slice(&x[(i * d1 + j) * d2..(i * d1 + j + 1) * d2]);
            }
        }
        self.push("swap_axes01", Tensor::from_parts(vec![d1, d0, d2], out), Op::SwapAxes01(a), &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.nodes[a.0].value.reshape(shape.to_vec())?;
        self.push("reshape", value, Op::Reshape(a), &[a])
    }

    /// Rows `table[ids[i]]`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (r, c) = dims2("gather_rows", self.shape(table))?;
        let x = self.data(table);
        let mut out = Vec::with_capacity(ids.len() * c);
        for &id in ids {
            if id >= r {
                return Err(Error::InvalidToken { id, vocab_size: r });
            }
            out.extend_from_slice(&x[id * c..(id + 1) * c]);
        }
        self.push(
            "gather_rows",
            Tensor::from_parts(vec![ids.len(), c], out),
            Op::GatherRows(table, ids.to_vec()),
            &[table],
        )
    }

    /// Elements `a[i, ids[i]]` as a vector.
    pub fn pick(&mut self, a: Var, ids: &[usize]) -> Result<Var> {
        let (r, c) = dims2("pick", self.shape(a))?;
        if ids.len() != r {
            return Err(shape_err("pick", self.shape(a), &[ids.len()]));
        }
        let x = self.data(a);
        let mut out = Vec::with_capacity(r);
        for (i, &id) in ids.iter().enumerate() {
            if id >= c {
                return Err(Error::InvalidToken { id, vocab_size: c });
            }
            out.push(x[i * c + id]);
        }
        self.push("pick", Tensor::from_parts(vec![r], out), Op::Pick(a, ids.to_vec()), &[a])
    }

    // -------------------------------------------------------------- backward

    /// Reverse pass from the scalar node `root`.
    pub fn backward(&self, root: Var) -> Result<Gradients<T>> {
        if self.nodes[root.0].value.numel() != 1 {
            return Err(Error::invalid(format!(
                "backward needs a scalar root, got shape {:?}",
                self.shape(root)
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(vec![T::one()]);
        let mut out: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if node.requires_grad {
                self.propagate(node, &g, &mut grads);
            }
            if matches!(node.op, Op::Leaf) {
                out[i] = Some(Tensor::from_parts(node.value.shape().to_vec(), g));
            }
        }
        for (i, g) in out.iter().enumerate() {
            if let Some(g) = g {
                if !g.all_finite() {
                    return Err(Error::NonFinite {
                        op: op_name(&self.nodes[i].op),
                    });
                }
            }
        }
        Ok(Gradients { grads: out })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        macro_rules! with_grad {
            ($v:expr, |$d:ident| $body:block) => {
                if self.wants($v) {
                    let n = self.nodes[$v.0].value.numel();
                    let $d: &mut Vec<T> = grads[$v.0].get_or_insert_with(|| vec![T::zero(); n]);
                    $body
                }
            };
        }
        let y = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, trans_b } => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = node.value.shape()[1];
                let (av, bv) = (self.data(*a), self.data(*b));
                with_grad!(*a, |d| {
                    // dA = dC @ B^T  (or dC @ B when B was transposed)
                    let (rsb, csb) = if *trans_b { (k as isize, 1) } else { (1, n as isize) };
                    T::gemm(m, n, k, T::one(), g, n as isize, 1, bv, rsb, csb, T::one(), d, k as isize, 1);
                });
                with_grad!(*b, |d| {
                    if *trans_b {
                        // dB[n, k] = dC^T @ A
                        T::gemm(n, m, k, T::one(), g, 1, n as isize, av, k as isize, 1, T::one(), d, k as isize, 1);
                    } else {
                        // dB[k, n] = A^T @ dC
                        T::gemm(k, m, n, T::one(), av, 1, k as isize, g, n as isize, 1, T::one(), d, n as isize, 1);
                    }
                });
            }
            Op::Add(a, b) => {
                with_grad!(*a, |d| { acc(d, g) });
                with_grad!(*b, |d| { acc(d, g) });
            }
            Op::Sub(a, b) => {
                with_grad!(*a, |d| { acc(d, g) });
                with_grad!(*b, |d| {
                    for (o, &x) in d.iter_mut().zip(g) {
                        *o = *o - x;
                    }
                });
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.data(*a), self.data(*b));
                with_grad!(*a, |d| {
                    for ((o, &x), &w) in d.iter_mut().zip(g).zip(bv) {
                        *o = *o + x * w;
                    }
                });
                with_grad!(*b, |d| {
                    for ((o, &x), &w) in d.iter_mut().zip(g).zip(av) {
                        *o = *o + x * w;
                    }
                });
            }
            Op::AddRow(a, r) => {
                let c = self.shape(*r)[0];
                with_grad!(*a, |d| { acc(d, g) });
                with_grad!(*r, |d| {
                    for row in g.chunks_exact(c.max(1)) {
                        acc(d, row);
                    }
                });
            }
            Op::MulRow(a, r) => {
                let c = self.shape(*r)[0];
                let (av, rv) = (self.data(*a), self.data(*r));
                with_grad!(*a, |d| {
                    for (drow, grow) in d.chunks_exact_mut(c.max(1)).zip(g.chunks_exact(c.max(1))) {
                        for ((o, &x), &w) in drow.iter_mut().zip(grow).zip(rv) {
                            *o = *o + x * w;
                        }
                    }
                });
                with_grad!(*r, |d| {
                    for (arow, grow) in av.chunks_exact(c.max(1)).zip(g.chunks_exact(c.max(1))) {
                        for ((o, &x), &v) in d.iter_mut().zip(grow).zip(arow) {
                            *o = *o + x * v;
                        }
                    }
                });
            }
            Op::Scale(a, c) => with_grad!(*a, |d| {
                for (o, &x) in d.iter_mut().zip(g) {
                    *o = *o + x * *c;
                }
            }),
            Op::Abs(a) => {
                let av = self.data(*a);
                with_grad!(*a, |d| {
                    for ((o, &x), &v) in d.iter_mut().zip(g).zip(av) {
                        // subgradient 0 at the kink
                        let s = if v > T::zero() {
                            T::one()
                        } else if v < T::zero() {
                            -T::one()
                        } else {
                            T::zero()
                        };
                        *o = *o + x * s;
                    }
                });
            }
            Op::Square(a) => {
                let av = self.data(*a);
                with_grad!(*a, |d| {
                    for ((o, &x), &v) in d.iter_mut().zip(g).zip(av) {
                        *o = *o + T::c(2.0) * v * x;
                    }
                });
            }
            Op::Sum(a) => with_grad!(*a, |d| {
                for o in d.iter_mut() {
                    *o = *o + g[0];
                }
            }),
            Op::Mean(a) => with_grad!(*a, |d| {
                let s = g[0] / T::c(d.len() as f64);
                for o in d.iter_mut() {
                    *o = *o + s;
                }
            }),
            Op::Softmax(a) | Op::CausalSoftmax(a) => {
                let c = node.value.shape()[1];
                with_grad!(*a, |d| {
                    for ((drow, grow), yrow) in d.chunks_exact_mut(c).zip(g.chunks_exact(c)).zip(y.chunks_exact(c)) {
                        let dot = grow.iter().zip(yrow).fold(T::zero(), |s, (&x, &p)| s + x * p);
                        for ((o, &x), &p) in drow.iter_mut().zip(grow).zip(yrow) {
                            *o = *o + p * (x - dot);
                        }
                    }
                });
            }
            Op::LogSoftmax(a) => {
                let c = node.value.shape()[1];
                with_grad!(*a, |d| {
                    for ((drow, grow), yrow) in d.chunks_exact_mut(c).zip(g.chunks_exact(c)).zip(y.chunks_exact(c)) {
                        let total = grow.iter().fold(T::zero(), |s, &x| s + x);
                        for ((o, &x), &ly) in drow.iter_mut().zip(grow).zip(yrow) {
                            *o = *o + x - ly.exp() * total;
                        }
                    }
                });
            }
            Op::LayerNorm(a, rstd) => {
                let c = node.value.shape()[1];
                let n = T::c(c as f64);
                with_grad!(*a, |d| {
                    for (((drow, grow), yrow), &rs) in d
                        .chunks_exact_mut(c)
                        .zip(g.chunks_exact(c))
                        .zip(y.chunks_exact(c))
                        .zip(rstd)
                    {
                        let mg = grow.iter().fold(T::zero(), |s, &x| s + x) / n;
                        let mgy = grow.iter().zip(yrow).fold(T::zero(), |s, (&x, &v)| s + x * v) / n;
                        for ((o, &x), &v) in drow.iter_mut().zip(grow).zip(yrow) {
                            *o = *o + rs * (x - mg - v * mgy);
                        }
                    }
                });
            }
            Op::Gelu(a) => {
                let av = self.data(*a);
                with_grad!(*a, |d| {
                    for ((o, &x), &v) in d.iter_mut().zip(g).zip(av) {
                        *o = *o + x * gelu_grad(v);
                    }
                });
            }
            Op::Relu(a) => {
                let av = self.data(*a);
                with_grad!(*a, |d| {
                    for ((o, &x), &v) in d.iter_mut().zip(g).zip(av) {
                        if v > T::zero() {
                            *o = *o + x;
                        }
                    }
                });
            }
            Op::Sigmoid(a) => with_grad!(*a, |d| {
                for ((o, &x), &s) in d.iter_mut().zip(g).zip(y) {
                    *o = *o + x * s * (T::one() - s);
                }
            }),
            Op::Conv2d { x, w, b, stride, pad } => {
                let (ci, h, wd) = {
                    let s = self.shape(*x);
                    (s[0], s[1], s[2])
                };
                let (co, kh, kw) = {
                    let s = self.shape(*w);
                    (s[0], s[2], s[3])
                };
                let (oh, ow) = (node.value.shape()[1], node.value.shape()[2]);
                let (xs, ws) = (self.data(*x), self.data(*w));
                let each = |f: &mut dyn FnMut(usize, usize, usize, usize)| {
                    for o in 0..co {
                        for i in 0..oh {
                            for j in 0..ow {
                                for c in 0..ci {
                                    for di in 0..kh {
                                        let yi = (i * stride.0 + di) as isize - pad.0 as isize;
                                        if yi < 0 || yi >= h as isize {
                                            continue;
                                        }
                                        for dj in 0..kw {
                                            let xj = (j * stride.1 + dj) as isize - pad.1 as isize;
                                            if xj < 0 || xj >= wd as isize {
                                                continue;
                                            }
                                            f(
                                                (o * oh + i) * ow + j,
                                                ((o * ci + c) * kh + di) * kw + dj,
                                                (c * h + yi as usize) * wd + xj as usize,
                                                o,
                                            );
                                        }
                                    }
                                }
                            }
                        }
                    }
                };
                with_grad!(*x, |d| {
                    each(&mut |gi, wi, xi, _| d[xi] = d[xi] + g[gi] * ws[wi]);
                });
                with_grad!(*w, |d| {
                    each(&mut |gi, wi, xi, _| d[wi] = d[wi] + g[gi] * xs[xi]);
                });
                with_grad!(*b, |d| {
                    for o in 0..co {
                        let s = g[o * oh * ow..(o + 1) * oh * ow].iter().fold(T::zero(), |s, &v| s + v);
                        d[o] = d[o] + s;
                    }
                });
            }
            Op::DepthwiseConv1d { x, w, b, stride, pad } => {
                let (t, c) = (self.shape(*x)[0], self.shape(*x)[1]);
                let k = self.shape(*w)[1];
                let ot = node.value.shape()[0];
                let (xs, ws) = (self.data(*x), self.data(*w));
                let each = |f: &mut dyn FnMut(usize, usize, usize)| {
                    for i in 0..ot {
                        for ch in 0..c {
                            for dd in 0..k {
                                let ti = (i * stride + dd) as isize - *pad as isize;
                                if ti >= 0 && (ti as usize) < t {
                                    f(i * c + ch, ch * k + dd, ti as usize * c + ch);
                                }
                            }
                        }
                    }
                };
                with_grad!(*x, |d| {
                    each(&mut |gi, wi, xi| d[xi] = d[xi] + g[gi] * ws[wi]);
                });
                with_grad!(*w, |d| {
                    each(&mut |gi, wi, xi| d[wi] = d[wi] + g[gi] * xs[xi]);
                });
                with_grad!(*b, |d| {
                    for row in g.chunks_exact(c) {
                        acc(d, row);
                    }
                });
            }
            Op::SliceRows(a, start) => {
                let c = self.shape(*a)[1];
                with_grad!(*a, |d| {
                    acc(&mut d[start * c..start * c + g.len()], g);
                });
            }
            Op::SliceCols(a, start) => {
                let c = self.shape(*a)[1];
                let w = node.value.shape()[1];
                with_grad!(*a, |d| {
                    if w > 0 {
                        for (i, grow) in g.chunks_exact(w).enumerate() {
                            acc(&mut d[i * c + start..i * c + start + w], grow);
                        }
                    }
                });
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for p in parts {
                    let n = self.nodes[p.0].value.numel();
                    with_grad!(*p, |d| { acc(d, &g[off..off + n]) });
                    off += n;
                }
            }
            Op::ConcatCols(parts) => {
                let total = node.value.shape()[1];
                let mut col = 0;
                for p in parts {
                    let c = self.shape(*p)[1];
                    with_grad!(*p, |d| {
                        if c > 0 {
                            for (i, drow) in d.chunks_exact_mut(c).enumerate() {
                                acc(drow, &g[i * total + col..i * total + col + c]);
                            }
                        }
                    });
                    col += c;
                }
            }
            Op::Transpose(a) => {
                let (r, c) = (self.shape(*a)[0], self.shape(*a)[1]);
                with_grad!(*a, |d| {
                    for i in 0..r {
                        for j in 0..c {
                            d[i * c + j] = d[i * c + j] + g[j * r + i];
                        }
                    }
                });
            }
            Op::SwapAxes01(a) => {
                let s = self.shape(*a);
                let (d0, d1, d2) = (s[0], s[1], s[2]);
                with_grad!(*a, |d| {
                    for i in 0..d0 {
                        for j in 0..d1 {
                            acc(
                                &mut d[(i * d1 + j) * d2..(i * d1 + j + 1) * d2],
                                &g[(j * d0 + i) * d2..(j * d0 + i + 1) * d2],
                            );
                        }
                    }
                });
            }
            Op::Reshape(a) => with_grad!(*a, |d| { acc(d, g) }),
            Op::GatherRows(table, ids) => {
                let c = self.shape(*table)[1];
                with_grad!(*table, |d| {
                    for (k, &id) in ids.iter().enumerate() {
                        acc(&mut d[id * c..(id + 1) * c], &g[k * c..(k + 1) * c]);
                    }
                });
            }
            Op::Pick(a, ids) => {
                let c = self.shape(*a)[1];
                with_grad!(*a, |d| {
                    for (k, &id) in ids.iter().enumerate() {
                        d[k * c + id] = d[k * c + id] + g[k];
                    }
                });
            }
        }
    }
}

fn acc<T: Real>(dst: &mut [T], src: &[T]) {
    for (o, &x) in dst.iter_mut().zip(src) {
        *o = *o + x;
    }
}

fn op_name<T>(op: &Op<T>) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::MatMul { .. } => "matmul",
        Op::Add(..) => "add",
        Op::Sub(..) => "sub",
        Op::Mul(..) => "mul",
        Op::AddRow(..) => "add_row",
        Op::MulRow(..) => "mul_row",
        Op::Scale(..) => "scale",
        Op::Abs(..) => "abs",
        Op::Square(..) => "square",
        Op::Sum(..) => "sum",
        Op::Mean(..) => "mean",
        Op::Softmax(..) => "softmax",
        Op::CausalSoftmax(..) => "causal_softmax",
        Op::LogSoftmax(..) => "log_softmax",
        Op::LayerNorm(..) => "layer_norm",
        Op::Gelu(..) => "gelu",
        Op::Relu(..) => "relu",
        Op::Sigmoid(..) => "sigmoid",
        Op::Conv2d { .. } => "conv2d",
        Op::DepthwiseConv1d { .. } => "depthwise_conv1d",
        Op::SliceRows(..) => "slice_rows",
        Op::SliceCols(..) => "slice_cols",
        Op::ConcatRows(..) => "concat_rows",
        Op::ConcatCols(..) => "concat_cols",
        Op::Transpose(..) => "transpose",
        Op::SwapAxes01(..) => "swap_axes01",
        Op::Reshape(..) => "reshape",
        Op::GatherRows(..) => "gather_rows",
        Op::Pick(..) => "pick",
    }
}
