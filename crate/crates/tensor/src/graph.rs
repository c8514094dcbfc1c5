//! Tape-based reverse-mode differentiation.
//!
//! Every op appends a node whose inputs precede it, so node order is already a
//! topological order and [`Graph::backward`] simply walks the tape in reverse.

use crate::error::{shape_err, Result, TensorError};
use crate::kernels::{self, gemm};
use crate::tensor::Tensor;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    ScaleBy(Var, Var),
    MatMul(Var, Var),
    Transpose(Var),
    Softmax(Var, usize),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Silu(Var),
    Tanh(Var),
    Relu(Var),
    Sqrt(Var),
    SumAll(Var),
    SumRows(Var),
    SumCols(Var),
    ExpandRows(Var),
    SelectRows(Var, Vec<usize>),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    Reshape(Var),
    Trace(Var),
    TraceSqrtPsd {
        m: Var,
        vals: Vec<f64>,
        vecs: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Tensor>,
}

/// Recording of a differentiable computation.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return shape_err(op, format!("{:?} vs {:?}", a.shape(), b.shape()));
    }
    Ok(())
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
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
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// A leaf that collects gradients.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf excluded from differentiation.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.constant(Tensor::scalar(value))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf after [`Graph::backward`].
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("add", self.value(a), self.value(b))?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        let rg = self.needs(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("sub", self.value(a), self.value(b))?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        let rg = self.needs(&[a, b]);
        Ok(self.push(out, Op::Sub(a, b), rg))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("mul", self.value(a), self.value(b))?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        let rg = self.needs(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let out = self.value(x).scale(c);
        let rg = self.needs(&[x]);
        self.push(out, Op::Scale(x, c), rg)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let out = self.value(x).map(|v| v + c);
        let rg = self.needs(&[x]);
        self.push(out, Op::AddScalar(x), rg)
    }

    /// `s · x` for a one-element tensor `s`.
    pub fn scale_by(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.value(s).numel() != 1 {
            return shape_err("scale_by", format!("scale has shape {:?}", self.shape(s)));
        }
        let c = self.value(s).item();
        let out = self.value(x).scale(c);
        let rg = self.needs(&[x, s]);
        Ok(self.push(out, Op::ScaleBy(x, s), rg))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = kernels::matmul(self.value(a), self.value(b))?;
        let rg = self.needs(&[a, b]);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        if !self.value(x).is_matrix() {
            return shape_err("transpose", format!("expected matrix, got {:?}", self.shape(x)));
        }
        let out = self.value(x).transpose();
        let rg = self.needs(&[x]);
        Ok(self.push(out, Op::Transpose(x), rg))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let out = kernels::softmax(self.value(x), axis)?;
        let rg = self.needs(&[x]);
        Ok(self.push(out, Op::Softmax(x, axis), rg))
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let out = kernels::layer_norm(self.value(x), self.value(gain), self.value(bias), eps)?;
        let (xhat, inv_std) = kernels::normalize_rows(self.value(x), eps);
        let rg = self.needs(&[x, gain, bias]);
        Ok(self.push(
            out,
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

    /// `x · sigmoid(x)`.
    pub fn silu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v * sigmoid(v));
        let rg = self.needs(&[x]);
        self.push(out, Op::Silu(x), rg)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let out = self.value(x).map(f64::tanh);
        let rg = self.needs(&[x]);
        self.push(out, Op::Tanh(x), rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.max(0.0));
        let rg = self.needs(&[x]);
        self.push(out, Op::Relu(x), rg)
    }

    /// Elementwise square root; inputs must be positive.
    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        if self.value(x).data().iter().any(|&v| v <= 0.0) {
            return Err(TensorError::Contract("sqrt of a non-positive entry".into()));
        }
        let out = self.value(x).map(f64::sqrt);
        let rg = self.needs(&[x]);
        Ok(self.push(out, Op::Sqrt(x), rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        let rg = self.needs(&[x]);
        self.push(out, Op::SumAll(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).numel().max(1) as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// Column sums of a matrix: `n×d → 1×d`.
    pub fn sum_rows(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if !t.is_matrix() {
            return shape_err("sum_rows", format!("expected matrix, got {:?}", t.shape()));
        }
        let d = t.cols();
        let mut out = vec![0.0; d];
        for r in 0..t.rows() {
            for (o, v) in out.iter_mut().zip(t.row(r)) {
                *o += v;
            }
        }
        let rg = self.needs(&[x]);
        Ok(self.push(Tensor::matrix(1, d, out)?, Op::SumRows(x), rg))
    }

    /// Row sums of a matrix: `n×d → n×1`.
    pub fn sum_cols(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if !t.is_matrix() {
            return shape_err("sum_cols", format!("expected matrix, got {:?}", t.shape()));
        }
        let out: Vec<f64> = (0..t.rows()).map(|r| t.row(r).iter().sum()).collect();
        let n = out.len();
        let rg = self.needs(&[x]);
        Ok(self.push(Tensor::matrix(n, 1, out)?, Op::SumCols(x), rg))
    }

    /// Mean over rows: `n×d → 1×d`.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).rows().max(1) as f64;
        let s = self.sum_rows(x)?;
        Ok(self.scale(s, 1.0 / n))
    }

    /// Repeats a `d` vector (or `1×d` row) into `n` identical rows.
    pub fn expand_rows(&mut self, x: Var, n: usize) -> Result<Var> {
        let t = self.value(x);
        let ok = t.rank() == 1 || (t.is_matrix() && t.rows() == 1);
        if !ok {
            return shape_err("expand_rows", format!("expected a row, got {:?}", t.shape()));
        }
        let d = t.numel();
        let mut out = Vec::with_capacity(n * d);
        for _ in 0..n {
            out.extend_from_slice(t.data());
        }
        let rg = self.needs(&[x]);
        Ok(self.push(Tensor::matrix(n, d, out)?, Op::ExpandRows(x), rg))
    }

    /// Gathers rows by index (repeats allowed).
    pub fn select_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let t = self.value(x);
        if !t.is_matrix() {
            return shape_err("select_rows", format!("expected matrix, got {:?}", t.shape()));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= t.rows()) {
            return shape_err("select_rows", format!("row {bad} out of {}", t.rows()));
        }
        let d = t.cols();
        let mut out = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            out.extend_from_slice(t.row(i));
        }
        let rg = self.needs(&[x]);
        Ok(self.push(Tensor::matrix(idx.len(), d, out)?, Op::SelectRows(x, idx.to_vec()), rg))
    }

    /// Rows `[start, end)`.
    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let idx: Vec<usize> = (start..end).collect();
        self.select_rows(x, &idx)
    }

    /// Stacks matrices vertically.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return shape_err("concat_rows", "no inputs");
        };
        let d = self.value(first).cols();
        let mut out = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let t = self.value(p);
            if !t.is_matrix() || t.cols() != d {
                return shape_err("concat_rows", format!("{:?} does not have {d} columns", t.shape()));
            }
            out.extend_from_slice(t.data());
            rows += t.rows();
        }
        let rg = self.needs(parts);
        Ok(self.push(Tensor::matrix(rows, d, out)?, Op::ConcatRows(parts.to_vec()), rg))
    }

    /// Joins matrices side by side.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return shape_err("concat_cols", "no inputs");
        };
        let n = self.value(first).rows();
        let mut total = 0;
        for &p in parts {
            let t = self.value(p);
            if !t.is_matrix() || t.rows() != n {
                return shape_err("concat_cols", format!("{:?} does not have {n} rows", t.shape()));
            }
            total += t.cols();
        }
        let mut out = Vec::with_capacity(n * total);
        for r in 0..n {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(r));
            }
        }
        let rg = self.needs(parts);
        Ok(self.push(Tensor::matrix(n, total, out)?, Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        let rg = self.needs(&[x]);
        Ok(self.push(out, Op::Reshape(x), rg))
    }

    pub fn trace(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if !t.is_matrix() || t.rows() != t.cols() {
            return shape_err("trace", format!("expected square matrix, got {:?}", t.shape()));
        }
        let tr = (0..t.rows()).map(|i| t.at(i, i)).sum();
        let rg = self.needs(&[x]);
        Ok(self.push(Tensor::scalar(tr), Op::Trace(x), rg))
    }

    /// `tr(√M)` for a symmetric PSD matrix, differentiated through its eigendecomposition.
    ///
    /// Eigenvalues are clamped at zero for the value and at `1e-10` inside the
    /// gradient `½ U diag(λ^{-1/2}) Uᵀ`.
    pub fn trace_sqrt_psd(&mut self, m: Var) -> Result<Var> {
        let (vals, vecs) = kernels::sym_eigen(self.value(m))?;
        let tr = vals.iter().map(|l| l.max(0.0).sqrt()).sum();
        let rg = self.needs(&[m]);
        Ok(self.push(Tensor::scalar(tr), Op::TraceSqrtPsd { m, vals, vecs }, rg))
    }

    /// Efficient linear attention, composed from differentiable primitives.
    pub fn linear_attention(&mut self, q: Var, k: Var, v: Var) -> Result<Var> {
        let (qs, ks, vs) = (self.shape(q).to_vec(), self.shape(k).to_vec(), self.shape(v).to_vec());
        if qs.len() != 2 || ks.len() != 2 || vs.len() != 2 {
            return shape_err("linear_attention", "expected matrices");
        }
        if ks[0] == 0 {
            return Err(TensorError::EmptyContext);
        }
        if qs[1] != ks[1] || ks[0] != vs[0] {
            return shape_err("linear_attention", format!("Q {qs:?}, K {ks:?}, V {vs:?}"));
        }
        let q_norm = self.softmax(q, 1)?;
        let k_norm = self.softmax(k, 0)?;
        let k_t = self.transpose(k_norm)?;
        let context = self.matmul(k_t, v)?;
        self.matmul(q_norm, context)
    }

    /// Reverse pass from a scalar loss; leaf gradients accumulate across calls.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let shape = self.shape(loss).to_vec();
        if self.value(loss).numel() != 1 {
            return Err(TensorError::NotScalar(shape));
        }
        let mut grads: Vec<Option<Tensor>> = Vec::new();
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(Tensor::ones(&shape));

        for id in (0..=loss.0).rev() {
            if !self.nodes[id].requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            if matches!(self.nodes[id].op, Op::Leaf) {
                let node = &mut self.nodes[id];
                match &mut node.grad {
                    Some(acc) => acc.add_assign(&g),
                    None => node.grad = Some(g),
                }
                continue;
            }
            for (input, contribution) in self.input_grads(id, &g)? {
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                match &mut grads[input.0] {
                    Some(acc) => acc.add_assign(&contribution),
                    slot @ None => *slot = Some(contribution),
                }
            }
        }
        Ok(())
    }

    /// Vector-Jacobian products of node `id` for upstream gradient `g`.
    fn input_grads(&self, id: usize, g: &Tensor) -> Result<Vec<(Var, Tensor)>> {
        let node = &self.nodes[id];
        let val = |v: Var| &self.nodes[v.0].value;
        let out = match &node.op {
            Op::Leaf => Vec::new(),
            Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
            Op::Sub(a, b) => vec![(*a, g.clone()), (*b, g.scale(-1.0))],
            Op::Mul(a, b) => vec![
                (*a, g.zip_map(val(*b), |x, y| x * y)?),
                (*b, g.zip_map(val(*a), |x, y| x * y)?),
            ],
            Op::Scale(x, c) => vec![(*x, g.scale(*c))],
            Op::AddScalar(x) => vec![(*x, g.clone())],
            Op::ScaleBy(x, s) => {
                let c = val(*s).item();
                let ds: f64 = g.data().iter().zip(val(*x).data()).map(|(a, b)| a * b).sum();
                let ds = Tensor::new(val(*s).shape().to_vec(), vec![ds])?;
                vec![(*x, g.scale(c)), (*s, ds)]
            }
            Op::MatMul(a, b) => {
                let (at, bt) = (val(*a), val(*b));
                let (m, k, n) = (at.rows(), at.cols(), bt.cols());
                let mut ga = vec![0.0; m * k];
                gemm(m, n, k, g.data(), false, bt.data(), true, &mut ga, false);
                let mut gb = vec![0.0; k * n];
                gemm(k, m, n, at.data(), true, g.data(), false, &mut gb, false);
                vec![(*a, Tensor::matrix(m, k, ga)?), (*b, Tensor::matrix(k, n, gb)?)]
            }
            Op::Transpose(x) => vec![(*x, g.transpose())],
            Op::Softmax(x, axis) => {
                let y = &node.value;
                let (outer, len, inner) = kernels::axis_split(y.shape(), *axis);
                let (yd, gd) = (y.data(), g.data());
                let mut gx = vec![0.0; yd.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let base = o * len * inner + i;
                        let dot: f64 = (0..len).map(|a| yd[base + a * inner] * gd[base + a * inner]).sum();
                        for a in 0..len {
                            let p = base + a * inner;
                            gx[p] = yd[p] * (gd[p] - dot);
                        }
                    }
                }
                vec![(*x, Tensor::new(y.shape().to_vec(), gx)?)]
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let gain_t = val(*gain);
                let d = gain_t.numel();
                let mut gx = vec![0.0; xhat.len()];
                let mut gg = vec![0.0; d];
                let mut gbias = vec![0.0; d];
                for (r, is) in inv_std.iter().enumerate() {
                    let span = r * d..(r + 1) * d;
                    let (gr, xr) = (&g.data()[span.clone()], &xhat[span.clone()]);
                    let mut mean_dx = 0.0;
                    let mut mean_dx_x = 0.0;
                    for j in 0..d {
                        let dxh = gr[j] * gain_t.data()[j];
                        mean_dx += dxh;
                        mean_dx_x += dxh * xr[j];
                        gg[j] += gr[j] * xr[j];
                        gbias[j] += gr[j];
                    }
                    mean_dx /= d as f64;
                    mean_dx_x /= d as f64;
                    for j in 0..d {
                        let dxh = gr[j] * gain_t.data()[j];
                        gx[span.start + j] = is * (dxh - mean_dx - xr[j] * mean_dx_x);
                    }
                }
                vec![
                    (*x, Tensor::new(val(*x).shape().to_vec(), gx)?),
                    (*gain, Tensor::new(gain_t.shape().to_vec(), gg)?),
                    (*bias, Tensor::new(val(*bias).shape().to_vec(), gbias)?),
                ]
            }
            Op::Silu(x) => {
                let gx = g.zip_map(val(*x), |gv, xv| {
                    let s = sigmoid(xv);
                    gv * s * (1.0 + xv * (1.0 - s))
                })?;
                vec![(*x, gx)]
            }
            Op::Tanh(x) => vec![(*x, g.zip_map(&node.value, |gv, y| gv * (1.0 - y * y))?)],
            Op::Relu(x) => vec![(*x, g.zip_map(val(*x), |gv, xv| if xv > 0.0 { gv } else { 0.0 })?)],
            Op::Sqrt(x) => vec![(*x, g.zip_map(&node.value, |gv, y| gv * 0.5 / y)?)],
            Op::SumAll(x) => vec![(*x, Tensor::full(val(*x).shape(), g.item()))],
            Op::SumRows(x) => {
                let xt = val(*x);
                let mut gx = Vec::with_capacity(xt.numel());
                for _ in 0..xt.rows() {
                    gx.extend_from_slice(g.data());
                }
                vec![(*x, Tensor::new(xt.shape().to_vec(), gx)?)]
            }
            Op::SumCols(x) => {
                let xt = val(*x);
                let d = xt.cols();
                let mut gx = Vec::with_capacity(xt.numel());
                for r in 0..xt.rows() {
                    gx.extend(std::iter::repeat_n(g.data()[r], d));
                }
                vec![(*x, Tensor::new(xt.shape().to_vec(), gx)?)]
            }
            Op::ExpandRows(x) => {
                let xt = val(*x);
                let d = xt.numel();
                let mut gx = vec![0.0; d];
                for r in 0..g.rows() {
                    for (o, v) in gx.iter_mut().zip(g.row(r)) {
                        *o += v;
                    }
                }
                vec![(*x, Tensor::new(xt.shape().to_vec(), gx)?)]
            }
            Op::SelectRows(x, idx) => {
                let xt = val(*x);
                let mut gx = Tensor::zeros(xt.shape());
                for (r, &i) in idx.iter().enumerate() {
                    for (o, v) in gx.row_mut(i).iter_mut().zip(g.row(r)) {
                        *o += v;
                    }
                }
                vec![(*x, gx)]
            }
            Op::ConcatRows(parts) => {
                let d = g.cols();
                let mut offset = 0;
                let mut out = Vec::with_capacity(parts.len());
                for &p in parts {
                    let rows = val(p).rows();
                    let chunk = g.data()[offset * d..(offset + rows) * d].to_vec();
                    out.push((p, Tensor::matrix(rows, d, chunk)?));
                    offset += rows;
                }
                out
            }
            Op::ConcatCols(parts) => {
                let n = g.rows();
                let mut col = 0;
                let mut out = Vec::with_capacity(parts.len());
                for &p in parts {
                    let w = val(p).cols();
                    let mut chunk = Vec::with_capacity(n * w);
                    for r in 0..n {
                        chunk.extend_from_slice(&g.row(r)[col..col + w]);
                    }
                    out.push((p, Tensor::matrix(n, w, chunk)?));
                    col += w;
                }
                out
            }
            Op::Reshape(x) => vec![(*x, g.clone().reshape(val(*x).shape().to_vec())?)],
            Op::Trace(x) => vec![(*x, Tensor::eye(val(*x).rows()).scale(g.item()))],
            Op::TraceSqrtPsd { m, vals, vecs } => {
                let n = vals.len();
                let mut gm = vec![0.0; n * n];
                for (e, &lam) in vals.iter().enumerate() {
                    let w = g.item() * 0.5 / lam.max(1e-10).sqrt();
                    for i in 0..n {
                        let ui = vecs[i * n + e] * w;
                        for j in 0..n {
                            gm[i * n + j] += ui * vecs[j * n + e];
                        }
                    }
                }
                vec![(*m, Tensor::matrix(n, n, gm)?)]
            }
        };
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grad_of_sum_is_ones() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::from_rows(&[vec![1.0, -2.0], vec![0.5, 3.0]]).unwrap());
        let s = g.sum(x);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &Tensor::ones(&[2, 2]));
    }

    #[test]
    fn grad_of_sum_of_squares_is_twice_x() {
        let mut g = Graph::new();
        let xv = Tensor::vector(vec![1.0, -2.0, 0.25]);
        let x = g.leaf(xv.clone());
        let sq = g.mul(x, x).unwrap();
        let s = g.sum(sq);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &xv.scale(2.0));
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::vector(vec![1.0, 2.0]));
        assert_eq!(g.backward(x).unwrap_err(), TensorError::NotScalar(vec![2]));
    }

    #[test]
    fn constants_get_no_grad() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::vector(vec![1.0, 2.0]));
        let c = g.constant(Tensor::vector(vec![3.0, 4.0]));
        let p = g.mul(x, c).unwrap();
        let s = g.sum(p);
        g.backward(s).unwrap();
        assert!(g.grad(c).is_none());
        assert_eq!(g.grad(x).unwrap().data(), &[3.0, 4.0]);
    }

    #[test]
    fn gradients_accumulate_across_backward_calls() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::vector(vec![1.0]));
        let s = g.sum(x);
        g.backward(s).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[2.0]);
    }

    #[test]
    fn graph_attention_matches_kernel() {
        let q = Tensor::from_rows(&[vec![0.1, 0.4], vec![-1.0, 2.0], vec![0.0, 0.3]]).unwrap();
        let k = Tensor::from_rows(&[vec![1.0, 0.2], vec![0.5, -0.5]]).unwrap();
        let v = Tensor::from_rows(&[vec![3.0, 1.0], vec![-2.0, 0.0]]).unwrap();
        let mut g = Graph::new();
        let (qv, kv, vv) = (g.constant(q.clone()), g.constant(k.clone()), g.constant(v.clone()));
        let out = g.linear_attention(qv, kv, vv).unwrap();
        assert_eq!(g.value(out), &kernels::linear_attention(&q, &k, &v).unwrap());
    }
}
