//! Forward and backward math for each primitive, on plain slices.

use ndarray::linalg::general_mat_mul;
use ndarray::{ArrayView2, ArrayViewMut2, ShapeBuilder};

use super::tensor::Scalar;
use super::NumericsError;

/// Geometry of a (possibly batched) matrix product `[.., m, k] x [k, n]` or
/// `[.., m, k] x [.., k, n]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct MatDims {
    pub batch: usize,
    pub m: usize,
    pub k: usize,
    pub n: usize,
    /// Right operand is a single `[k, n]` matrix shared by every batch entry.
    pub shared_rhs: bool,
}

pub(crate) fn matmul_dims(a: &[usize], b: &[usize]) -> Result<(MatDims, Vec<usize>), NumericsError> {
    let err = || NumericsError::Shape {
        op: "matmul",
        detail: format!("{a:?} x {b:?}"),
    };
    if a.len() < 2 || b.len() < 2 {
        return Err(err());
    }
    let (m, k) = (a[a.len() - 2], a[a.len() - 1]);
    let (kb, n) = (b[b.len() - 2], b[b.len() - 1]);
    if k != kb {
        return Err(err());
    }
    let lead = &a[..a.len() - 2];
    let shared_rhs = b.len() == 2;
    if !shared_rhs && b[..b.len() - 2] != *lead {
        return Err(err());
    }
    let mut out = lead.to_vec();
    out.extend([m, n]);
    Ok((
        MatDims {
            batch: lead.iter().product(),
            m,
            k,
            n,
            shared_rhs,
        },
        out,
    ))
}

/// `c (+)= op(a) * op(b)` where `a` is logically `[m, k]` and `b` is `[k, n]`.
/// A transposed operand is stored in the opposite row-major layout.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    a_trans: bool,
    b: &[T],
    b_trans: bool,
    c: &mut [T],
    accumulate: bool,
) {
    let av = if a_trans {
        ArrayView2::from_shape((m, k).strides((1, m)), a)
    } else {
        ArrayView2::from_shape((m, k), a)
    }
    .expect("gemm lhs geometry");
    let bv = if b_trans {
        ArrayView2::from_shape((k, n).strides((1, k)), b)
    } else {
        ArrayView2::from_shape((k, n), b)
    }
    .expect("gemm rhs geometry");
    let mut cv = ArrayViewMut2::from_shape((m, n), c).expect("gemm output geometry");
    let beta = if accumulate { T::one() } else { T::zero() };
    general_mat_mul(T::one(), &av, &bv, beta, &mut cv);
}

pub(crate) fn matmul_forward<T: Scalar>(d: MatDims, a: &[T], b: &[T]) -> Vec<T> {
    let mut out = vec![T::zero(); d.batch * d.m * d.n];
    if d.shared_rhs {
        gemm(d.batch * d.m, d.k, d.n, a, false, b, false, &mut out, false);
    } else {
        let (sa, sb, sc) = (d.m * d.k, d.k * d.n, d.m * d.n);
        for i in 0..d.batch {
            gemm(
                d.m,
                d.k,
                d.n,
                &a[i * sa..(i + 1) * sa],
                false,
                &b[i * sb..(i + 1) * sb],
                false,
                &mut out[i * sc..(i + 1) * sc],
                false,
            );
        }
    }
    out
}

/// Gradient of the left operand: `dA = dC * B^T`.
pub(crate) fn matmul_grad_lhs<T: Scalar>(d: MatDims, g: &[T], b: &[T]) -> Vec<T> {
    let mut out = vec![T::zero(); d.batch * d.m * d.k];
    if d.shared_rhs {
        gemm(d.batch * d.m, d.n, d.k, g, false, b, true, &mut out, false);
    } else {
        let (sa, sb, sc) = (d.m * d.k, d.k * d.n, d.m * d.n);
        for i in 0..d.batch {
            gemm(
                d.m,
                d.n,
                d.k,
                &g[i * sc..(i + 1) * sc],
                false,
                &b[i * sb..(i + 1) * sb],
                true,
                &mut out[i * sa..(i + 1) * sa],
                false,
            );
        }
    }
    out
}

/// Gradient of the right operand: `dB = A^T * dC`, summed over the batch when shared.
pub(crate) fn matmul_grad_rhs<T: Scalar>(d: MatDims, g: &[T], a: &[T]) -> Vec<T> {
    if d.shared_rhs {
        let mut out = vec![T::zero(); d.k * d.n];
        gemm(d.k, d.batch * d.m, d.n, a, true, g, false, &mut out, false);
        out
    } else {
        let mut out = vec![T::zero(); d.batch * d.k * d.n];
        let (sa, sb, sc) = (d.m * d.k, d.k * d.n, d.m * d.n);
        for i in 0..d.batch {
            gemm(
                d.k,
                d.m,
                d.n,
                &a[i * sa..(i + 1) * sa],
                true,
                &g[i * sc..(i + 1) * sc],
                false,
                &mut out[i * sb..(i + 1) * sb],
                false,
            );
        }
        out
    }
}

/// Sum `g` (length `reps * width`) down to `width` entries.
pub(crate) fn reduce_leading<T: Scalar>(g: &[T], width: usize) -> Vec<T> {
    let mut out = vec![T::zero(); width];
    for chunk in g.chunks_exact(width) {
        for (o, &v) in out.iter_mut().zip(chunk) {
            *o = *o + v;
        }
    }
    out
}

pub(crate) fn softmax_rows<T: Scalar>(x: &[T], width: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for (row, o) in x.chunks_exact(width).zip(out.chunks_exact_mut(width)) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut total = T::zero();
        for (oi, &xi) in o.iter_mut().zip(row) {
            *oi = (xi - max).exp();
            total = total + *oi;
        }
        for oi in o.iter_mut() {
            *oi = *oi / total;
        }
    }
    out
}

pub(crate) fn softmax_rows_grad<T: Scalar>(y: &[T], g: &[T], width: usize) -> Vec<T> {
    let mut out = vec![T::zero(); y.len()];
    for ((yr, gr), o) in y
        .chunks_exact(width)
        .zip(g.chunks_exact(width))
        .zip(out.chunks_exact_mut(width))
    {
        let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
        for ((oi, &yi), &gi) in o.iter_mut().zip(yr).zip(gr) {
            *oi = yi * (gi - dot);
        }
    }
    out
}

pub(crate) fn log_softmax_rows<T: Scalar>(x: &[T], width: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for (row, o) in x.chunks_exact(width).zip(out.chunks_exact_mut(width)) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<T>().ln();
        for (oi, &xi) in o.iter_mut().zip(row) {
            *oi = xi - lse;
        }
    }
    out
}

pub(crate) fn log_softmax_rows_grad<T: Scalar>(y: &[T], g: &[T], width: usize) -> Vec<T> {
    let mut out = vec![T::zero(); y.len()];
    for ((yr, gr), o) in y
        .chunks_exact(width)
        .zip(g.chunks_exact(width))
        .zip(out.chunks_exact_mut(width))
    {
        let total: T = gr.iter().copied().sum();
        for ((oi, &yi), &gi) in o.iter_mut().zip(yr).zip(gr) {
            *oi = gi - yi.exp() * total;
        }
    }
    out
}

/// Normalized rows and their reciprocal standard deviations.
pub(crate) struct LayerNormOut<T> {
    pub y: Vec<T>,
    pub xhat: Vec<T>,
    pub rstd: Vec<T>,
}

pub(crate) fn layer_norm<T: Scalar>(x: &[T], gamma: &[T], beta: &[T], eps: T) -> LayerNormOut<T> {
    let width = gamma.len();
    let rows = x.len() / width;
    let nw = T::of(width as f64);
    let mut y = vec![T::zero(); x.len()];
    let mut xhat = vec![T::zero(); x.len()];
    let mut rstd = vec![T::zero(); rows];
    for r in 0..rows {
        let row = &x[r * width..(r + 1) * width];
        let mean = row.iter().copied().sum::<T>() / nw;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nw;
        let s = T::one() / (var + eps).sqrt();
        rstd[r] = s;
        for j in 0..width {
            let h = (row[j] - mean) * s;
            xhat[r * width + j] = h;
            y[r * width + j] = h * gamma[j] + beta[j];
        }
    }
    LayerNormOut { y, xhat, rstd }
}

/// Returns `(dx, dgamma, dbeta)`.
pub(crate) fn layer_norm_grad<T: Scalar>(
    g: &[T],
    xhat: &[T],
    rstd: &[T],
    gamma: &[T],
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let width = gamma.len();
    let nw = T::of(width as f64);
    let mut dx = vec![T::zero(); g.len()];
    let mut dgamma = vec![T::zero(); width];
    let mut dbeta = vec![T::zero(); width];
    for (r, &s) in rstd.iter().enumerate() {
        let gr = &g[r * width..(r + 1) * width];
        let hr = &xhat[r * width..(r + 1) * width];
        let mut mean_dh = T::zero();
        let mut mean_dh_h = T::zero();
        for j in 0..width {
            let dh = gr[j] * gamma[j];
            mean_dh = mean_dh + dh;
            mean_dh_h = mean_dh_h + dh * hr[j];
            dgamma[j] = dgamma[j] + gr[j] * hr[j];
            dbeta[j] = dbeta[j] + gr[j];
        }
        mean_dh = mean_dh / nw;
        mean_dh_h = mean_dh_h / nw;
        for j in 0..width {
            let dh = gr[j] * gamma[j];
            dx[r * width + j] = s * (dh - mean_dh - hr[j] * mean_dh_h);
        }
    }
    (dx, dgamma, dbeta)
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_K: f64 = 0.044_715;

pub(crate) fn gelu<T: Scalar>(x: T) -> T {
    let (c, k, half) = (T::of(GELU_C), T::of(GELU_K), T::of(0.5));
    half * x * (T::one() + (c * (x + k * x * x * x)).tanh())
}

pub(crate) fn gelu_grad<T: Scalar>(x: T) -> T {
    let (c, k, half) = (T::of(GELU_C), T::of(GELU_K), T::of(0.5));
    let t = (c * (x + k * x * x * x)).tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + T::of(3.0) * k * x * x)
}

pub(crate) fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Row-major strides of `shape`.
pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Axis permutation: output axis `i` is input axis `perm[i]`.
pub(crate) fn permute<T: Scalar>(x: &[T], shape: &[usize], perm: &[usize]) -> (Vec<T>, Vec<usize>) {
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = Vec::with_capacity(x.len());
    let nd = out_shape.len();
    let mut idx = vec![0usize; nd];
    let mut offset = 0usize;
    for _ in 0..x.len() {
        out.push(x[offset]);
        for ax in (0..nd).rev() {
            idx[ax] += 1;
            offset += src_strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            offset -= src_strides[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
    (out, out_shape)
}

pub(crate) fn inverse_permutation(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}
