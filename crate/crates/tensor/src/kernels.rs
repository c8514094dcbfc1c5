//! Forward kernels shared by the eager API and the graph.

use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{shape_err, Result, TensorError};
use crate::tensor::Tensor;

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// `c (+)= op(a) · op(b)` where `op` optionally transposes a row-major operand.
///
/// `a` is stored as `m×k` (or `k×m` when `a_t`), `b` as `k×n` (or `n×k` when `b_t`).
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c.fill(0.0);
        }
        return;
    }
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    // SAFETY: slice lengths cover the strided m×k, k×n and m×n views checked above.
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

/// Matrix product of an `m×k` and a `k×n` tensor.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if !a.is_matrix() || !b.is_matrix() {
        return shape_err("matmul", format!("expected matrices, got {:?} and {:?}", a.shape(), b.shape()));
    }
    let (m, k) = (a.rows(), a.cols());
    let (k2, n) = (b.rows(), b.cols());
    if k != k2 {
        return shape_err("matmul", format!("inner dims {k} and {k2} differ"));
    }
    let mut out = vec![0.0; m * n];
    gemm(m, k, n, a.data(), false, b.data(), false, &mut out, false);
    Tensor::matrix(m, n, out)
}

/// Strides of `axis` within a row-major shape: (outer count, axis extent, inner count).
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Softmax along `axis`, stabilised by subtracting the per-slice maximum.
pub fn softmax(x: &Tensor, axis: usize) -> Result<Tensor> {
    if axis >= x.rank() {
        return Err(TensorError::Axis {
            op: "softmax",
            axis,
            rank: x.rank(),
        });
    }
    let (outer, len, inner) = axis_split(x.shape(), axis);
    let src = x.data();
    let mut out = vec![0.0; src.len()];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let mut max = f64::NEG_INFINITY;
            for a in 0..len {
                max = max.max(src[base + a * inner]);
            }
            let mut total = 0.0;
            for a in 0..len {
                let e = (src[base + a * inner] - max).exp();
                out[base + a * inner] = e;
                total += e;
            }
            for a in 0..len {
                out[base + a * inner] /= total;
            }
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

/// Normalised rows and reciprocal standard deviations, shared with the backward rule.
pub(crate) fn normalize_rows(x: &Tensor, eps: f64) -> (Vec<f64>, Vec<f64>) {
    let d = x.cols();
    let rows = x.numel().checked_div(d).unwrap_or(0);
    let mut xhat = vec![0.0; x.numel()];
    let mut inv_std = vec![0.0; rows];
    for r in 0..rows {
        let row = &x.data()[r * d..(r + 1) * d];
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let is = 1.0 / (var + eps).sqrt();
        inv_std[r] = is;
        for (o, v) in xhat[r * d..(r + 1) * d].iter_mut().zip(row) {
            *o = (v - mean) * is;
        }
    }
    (xhat, inv_std)
}

/// Layer normalisation over the last axis followed by a per-channel affine map.
pub fn layer_norm(x: &Tensor, gain: &Tensor, bias: &Tensor, eps: f64) -> Result<Tensor> {
    let d = x.cols();
    if d == 0 || gain.numel() != d || bias.numel() != d {
        return shape_err(
            "layer_norm",
            format!("feature dim {d}, gain {:?}, bias {:?}", gain.shape(), bias.shape()),
        );
    }
    let (mut xhat, _) = normalize_rows(x, eps);
    for row in xhat.chunks_mut(d) {
        for ((v, g), b) in row.iter_mut().zip(gain.data()).zip(bias.data()) {
            *v = *v * g + b;
        }
    }
    Tensor::new(x.shape().to_vec(), xhat)
}

/// Efficient-attention factorisation `softmax_rows(Q) · (softmax_cols(K)ᵀ V)`.
///
/// Each query row is normalised over its feature channels and each key channel is
/// normalised over the `m` key positions, so the cost is linear in sequence length.
pub fn linear_attention(q: &Tensor, k: &Tensor, v: &Tensor) -> Result<Tensor> {
    if !(q.is_matrix() && k.is_matrix() && v.is_matrix()) {
        return shape_err("linear_attention", "expected matrices");
    }
    if k.rows() == 0 {
        return Err(TensorError::EmptyContext);
    }
    if q.cols() != k.cols() || k.rows() != v.rows() {
        return shape_err(
            "linear_attention",
            format!("Q {:?}, K {:?}, V {:?}", q.shape(), k.shape(), v.shape()),
        );
    }
    let qs = softmax(q, 1)?;
    let ks = softmax(k, 0)?;
    let context = matmul(&ks.transpose(), v)?;
    matmul(&qs, &context)
}

/// Symmetric eigendecomposition of the symmetric part of a square matrix.
///
/// Returns eigenvalues and the row-major eigenvector matrix (eigenvectors as columns).
pub(crate) fn sym_eigen(m: &Tensor) -> Result<(Vec<f64>, Vec<f64>)> {
    let n = m.rows();
    if !m.is_matrix() || m.cols() != n {
        return shape_err("sym_eigen", format!("expected square matrix, got {:?}", m.shape()));
    }
    let data = m.data();
    let sym = DMatrix::from_fn(n, n, |i, j| 0.5 * (data[i * n + j] + data[j * n + i]));
    let eig = SymmetricEigen::new(sym);
    let mut vecs = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            vecs[i * n + j] = eig.eigenvectors[(i, j)];
        }
    }
    Ok((eig.eigenvalues.iter().copied().collect(), vecs))
}

/// Principal square root of the symmetric part of a PSD matrix (negative eigenvalues clamped to 0).
pub fn sqrtm_psd(m: &Tensor) -> Result<Tensor> {
    let n = m.rows();
    let (vals, vecs) = sym_eigen(m)?;
    let mut out = vec![0.0; n * n];
    for (e, &lam) in vals.iter().enumerate() {
        let s = lam.max(0.0).sqrt();
        if s == 0.0 {
            continue;
        }
        for i in 0..n {
            let ui = vecs[i * n + e] * s;
            for j in 0..n {
                out[i * n + j] += ui * vecs[j * n + e];
            }
        }
    }
    Tensor::matrix(n, n, out)
}

/// `tr(√M)` for a symmetric PSD matrix.
pub fn trace_sqrt_psd(m: &Tensor) -> Result<f64> {
    let (vals, _) = sym_eigen(m)?;
    Ok(vals.iter().map(|l| l.max(0.0).sqrt()).sum())
}
