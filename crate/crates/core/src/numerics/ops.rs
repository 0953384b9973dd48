//! Forward and backward kernels shared by every layer.
//!
//! Each differentiable kernel comes as a pair: the forward function and a
//! `*_backward` that maps an upstream gradient to input gradients.

use crate::error::{Error, Result};

use super::Matrix;

/// `C = alpha * op(A) * op(B) + beta * C` where `op` optionally transposes.
///
/// Panics on shape mismatch; internal callers guarantee shapes.
pub(crate) fn gemm(alpha: f64, a: &Matrix, ta: bool, b: &Matrix, tb: bool, beta: f64, c: &mut Matrix) {
    let (m, k) = if ta { (a.cols(), a.rows()) } else { a.shape() };
    let (k2, n) = if tb { (b.cols(), b.rows()) } else { b.shape() };
    assert_eq!(k, k2, "gemm inner dimension mismatch");
    assert_eq!(c.shape(), (m, n), "gemm output shape mismatch");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.scale_in_place(beta);
        return;
    }
    if m.min(k).min(n) <= SMALL_DIM {
        small_gemm(alpha, a, ta, b, tb, beta, c);
        return;
    }
    let (rsa, csa) = if ta { (1, a.cols() as isize) } else { (a.cols() as isize, 1) };
    let (rsb, csb) = if tb { (1, b.cols() as isize) } else { (b.cols() as isize, 1) };
    // SAFETY: strides describe the owned buffers exactly and shapes were checked above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_slice().as_ptr(),
            rsa,
            csa,
            b.as_slice().as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_slice().as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Below this inner or outer size, packing costs more than it saves.
const SMALL_DIM: usize = 16;

#[inline(always)]
fn axpy(out: &mut [f64], s: f64, x: &[f64]) {
    for (o, x) in out.iter_mut().zip(x) {
        *o += s * x;
    }
}

/// `out += s0·x0 + s1·x1 + s2·x2 + s3·x3`, one pass over `out`.
#[inline(always)]
fn axpy4(out: &mut [f64], s: [f64; 4], x: [&[f64]; 4]) {
    let n = out.len();
    let (x0, x1, x2, x3) = (&x[0][..n], &x[1][..n], &x[2][..n], &x[3][..n]);
    for j in 0..n {
        out[j] += (s[0] * x0[j] + s[1] * x1[j]) + (s[2] * x2[j] + s[3] * x3[j]);
    }
}

/// Dot product over eight interleaved partial sums, reduced in a fixed order.
/// [`dot8_avx`] computes exactly the same sums with vector instructions.
#[inline(always)]
fn dot8(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len().min(y.len());
    let split = n - n % 8;
    let mut acc = [0.0; 8];
    for (xs, ys) in x[..split].chunks_exact(8).zip(y[..split].chunks_exact(8)) {
        for l in 0..8 {
            acc[l] += xs[l] * ys[l];
        }
    }
    let v = [acc[0] + acc[4], acc[1] + acc[5], acc[2] + acc[6], acc[3] + acc[7]];
    let tail: f64 = x[split..n].iter().zip(&y[split..n]).map(|(a, b)| a * b).sum();
    ((v[0] + v[1]) + (v[2] + v[3])) + tail
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn dot8_avx(x: &[f64], y: &[f64]) -> f64 {
    use std::arch::x86_64::*;
    let n = x.len().min(y.len());
    let split = n - n % 8;
    let (xp, yp) = (x.as_ptr(), y.as_ptr());
    let mut a0 = _mm256_setzero_pd();
    let mut a1 = _mm256_setzero_pd();
    let mut i = 0;
    while i < split {
        // SAFETY: i + 8 <= split <= len of both slices.
        unsafe {
            a0 = _mm256_add_pd(a0, _mm256_mul_pd(_mm256_loadu_pd(xp.add(i)), _mm256_loadu_pd(yp.add(i))));
            a1 = _mm256_add_pd(a1, _mm256_mul_pd(_mm256_loadu_pd(xp.add(i + 4)), _mm256_loadu_pd(yp.add(i + 4))));
        }
        i += 8;
    }
    let mut v = [0.0; 4];
    // SAFETY: `v` holds four f64.
    unsafe { _mm256_storeu_pd(v.as_mut_ptr(), _mm256_add_pd(a0, a1)) };
    let tail: f64 = x[split..n].iter().zip(&y[split..n]).map(|(a, b)| a * b).sum();
    ((v[0] + v[1]) + (v[2] + v[3])) + tail
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn small_gemm(alpha: f64, a: &Matrix, ta: bool, b: &Matrix, tb: bool, beta: f64, c: &mut Matrix) {
    if beta == 0.0 {
        c.as_mut_slice().fill(0.0);
    } else if beta != 1.0 {
        c.scale_in_place(beta);
    }
    #[cfg(target_arch = "x86_64")]
    if std::is_x86_feature_detected!("avx2") {
        // SAFETY: the feature was detected at runtime.
        unsafe { small_gemm_avx2(alpha, a, ta, b, tb, c) };
        return;
    }
    small_gemm_body(alpha, a, ta, b, tb, c);
}

// Wider vectors only; no FMA, so results match the portable path bit for bit.
#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn small_gemm_avx2(alpha: f64, a: &Matrix, ta: bool, b: &Matrix, tb: bool, c: &mut Matrix) {
    if !ta && tb {
        for i in 0..c.rows() {
            for j in 0..c.cols() {
                // SAFETY: avx2 is enabled for this function.
                let v = alpha * unsafe { dot8_avx(a.row(i), b.row(j)) };
                c.row_mut(i)[j] += v;
            }
        }
    } else {
        small_gemm_body(alpha, a, ta, b, tb, c);
    }
}

#[inline(always)]
fn small_gemm_body(alpha: f64, a: &Matrix, ta: bool, b: &Matrix, tb: bool, c: &mut Matrix) {
    let (m, n) = c.shape();
    match (ta, tb) {
        (false, false) => {
            let k = a.cols();
            let split = k - k % 4;
            for i in 0..m {
                let ar = a.row(i);
                let cr = c.row_mut(i);
                for p in (0..split).step_by(4) {
                    let s = [alpha * ar[p], alpha * ar[p + 1], alpha * ar[p + 2], alpha * ar[p + 3]];
                    axpy4(cr, s, [b.row(p), b.row(p + 1), b.row(p + 2), b.row(p + 3)]);
                }
                for p in split..k {
                    axpy(cr, alpha * ar[p], b.row(p));
                }
            }
        }
        (false, true) => {
            for i in 0..m {
                for j in 0..n {
                    let v = alpha * dot8(a.row(i), b.row(j));
                    c.row_mut(i)[j] += v;
                }
            }
        }
        (true, false) => {
            let k = a.rows();
            let split = k - k % 4;
            for p in (0..split).step_by(4) {
                let ar = [a.row(p), a.row(p + 1), a.row(p + 2), a.row(p + 3)];
                let br = [b.row(p), b.row(p + 1), b.row(p + 2), b.row(p + 3)];
                for i in 0..m {
                    let s = [alpha * ar[0][i], alpha * ar[1][i], alpha * ar[2][i], alpha * ar[3][i]];
                    axpy4(c.row_mut(i), s, br);
                }
            }
            for p in split..k {
                let (ar, br) = (a.row(p), b.row(p));
                for (i, &x) in ar.iter().enumerate() {
                    axpy(c.row_mut(i), alpha * x, br);
                }
            }
        }
        (true, true) => {
            for i in 0..m {
                for j in 0..n {
                    let v: f64 = (0..a.rows()).map(|p| a.get(p, i) * b.get(j, p)).sum();
                    c.row_mut(i)[j] += alpha * v;
                }
            }
        }
    }
}

/// `a * b`, panicking on mismatch.
pub(crate) fn mm(a: &Matrix, b: &Matrix) -> Matrix {
    // `c` starts at zero, so accumulating avoids clearing it twice.
    let mut c = Matrix::zeros(a.rows(), b.cols());
    gemm(1.0, a, false, b, false, 1.0, &mut c);
    c
}

/// `aᵀ * b`.
pub(crate) fn mm_tn(a: &Matrix, b: &Matrix) -> Matrix {
    let mut c = Matrix::zeros(a.cols(), b.cols());
    gemm(1.0, a, true, b, false, 1.0, &mut c);
    c
}

/// `a * bᵀ`.
pub(crate) fn mm_nt(a: &Matrix, b: &Matrix) -> Matrix {
    let mut c = Matrix::zeros(a.rows(), b.rows());
    gemm(1.0, a, false, b, true, 1.0, &mut c);
    c
}

/// `acc += aᵀ * b`.
pub(crate) fn acc_tn(acc: &mut Matrix, a: &Matrix, b: &Matrix) {
    gemm(1.0, a, true, b, false, 1.0, acc);
}

/// Standard matrix product.
///
/// ```
/// use helo::numerics::{matmul, Matrix};
/// let a = Matrix::from_rows(&[[1.0, 2.0], [3.0, 4.0]]);
/// let b = Matrix::from_rows(&[[5.0], [6.0]]);
/// assert_eq!(matmul(&a, &b).unwrap(), Matrix::from_rows(&[[17.0], [39.0]]));
/// ```
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols() != b.rows() {
        return Err(Error::dim("matmul", a.shape(), b.shape()));
    }
    Ok(mm(a, b))
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(x: &Matrix) -> Matrix {
    let mut out = x.clone();
    for r in 0..out.rows() {
        softmax_in_place(out.row_mut(r));
    }
    out
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Gradient of [`softmax_rows`] given its output `y` and upstream `dy`.
pub fn softmax_rows_backward(y: &Matrix, dy: &Matrix) -> Matrix {
    let mut dx = Matrix::zeros(y.rows(), y.cols());
    for r in 0..y.rows() {
        let yr = y.row(r);
        let dyr = dy.row(r);
        let dot: f64 = yr.iter().zip(dyr).map(|(a, b)| a * b).sum();
        for ((d, &yv), &g) in dx.row_mut(r).iter_mut().zip(yr).zip(dyr) {
            *d = yv * (g - dot);
        }
    }
    dx
}

/// Intermediate values kept by [`layer_norm`] for its backward pass.
#[derive(Clone, Debug)]
pub struct LayerNormCache {
    normalized: Matrix,
    inv_std: Vec<f64>,
}

/// Per-row layer normalization, scaled by `gamma` and shifted by `beta` (both `1 x cols`).
pub fn layer_norm(x: &Matrix, gamma: &Matrix, beta: &Matrix, eps: f64) -> Result<Matrix> {
    layer_norm_cached(x, gamma, beta, eps).map(|(y, _)| y)
}

pub fn layer_norm_cached(
    x: &Matrix,
    gamma: &Matrix,
    beta: &Matrix,
    eps: f64,
) -> Result<(Matrix, LayerNormCache)> {
    let d = x.cols();
    if gamma.shape() != (1, d) {
        return Err(Error::dim("layer_norm gamma", x.shape(), gamma.shape()));
    }
    if beta.shape() != (1, d) {
        return Err(Error::dim("layer_norm beta", x.shape(), beta.shape()));
    }
    let mut normalized = Matrix::zeros(x.rows(), d);
    let mut out = Matrix::zeros(x.rows(), d);
    let mut inv_std = Vec::with_capacity(x.rows());
    let g = gamma.as_slice();
    let b = beta.as_slice();
    for r in 0..x.rows() {
        let row = x.row(r);
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let denom = var + eps;
        // eps = 0 on a constant row: treat the row as already centred.
        let is = if denom > 0.0 { 1.0 / denom.sqrt() } else { 0.0 };
        inv_std.push(is);
        let nr = normalized.row_mut(r);
        for (n, v) in nr.iter_mut().zip(row) {
            *n = (v - mean) * is;
        }
        let nr = normalized.row(r).to_vec();
        for (j, o) in out.row_mut(r).iter_mut().enumerate() {
            *o = nr[j] * g[j] + b[j];
        }
    }
    Ok((out, LayerNormCache { normalized, inv_std }))
}

/// Returns `(dx, dgamma, dbeta)`.
pub fn layer_norm_backward(cache: &LayerNormCache, gamma: &Matrix, dy: &Matrix) -> (Matrix, Matrix, Matrix) {
    let (rows, d) = dy.shape();
    let g = gamma.as_slice();
    let mut dx = Matrix::zeros(rows, d);
    let mut dgamma = Matrix::zeros(1, d);
    let mut dbeta = Matrix::zeros(1, d);
    let mut dn = vec![0.0; d];
    for r in 0..rows {
        let n = cache.normalized.row(r);
        let dyr = dy.row(r);
        for j in 0..d {
            dgamma.as_mut_slice()[j] += dyr[j] * n[j];
            dbeta.as_mut_slice()[j] += dyr[j];
            dn[j] = dyr[j] * g[j];
        }
        let mean_dn = dn.iter().sum::<f64>() / d as f64;
        let mean_dn_n = dn.iter().zip(n).map(|(a, b)| a * b).sum::<f64>() / d as f64;
        let is = cache.inv_std[r];
        for (j, o) in dx.row_mut(r).iter_mut().enumerate() {
            *o = is * (dn[j] - mean_dn - n[j] * mean_dn_n);
        }
    }
    (dx, dgamma, dbeta)
}

/// Pairwise cosine similarity between the rows of `a` and the rows of `b`.
#[derive(Clone, Debug)]
pub struct CosineSimilarity {
    pub matrix: Matrix,
    /// True when some row had zero norm; its similarities were set to 0.
    pub degenerate: bool,
}

fn row_norms(m: &Matrix) -> Vec<f64> {
    (0..m.rows())
        .map(|r| m.row(r).iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect()
}

/// `out[i][j] = <a_i, b_j> / (|a_i| |b_j|)`, clamped to `[-1, 1]`.
///
/// Zero-norm rows give similarity 0 and set the `degenerate` flag.
pub fn cosine_rows(a: &Matrix, b: &Matrix) -> Result<CosineSimilarity> {
    if a.cols() != b.cols() {
        return Err(Error::dim("cosine_rows", a.shape(), b.shape()));
    }
    let na = row_norms(a);
    let nb = row_norms(b);
    let mut degenerate = false;
    let mut matrix = Matrix::zeros(a.rows(), b.rows());
    for i in 0..a.rows() {
        for j in 0..b.rows() {
            let denom = na[i] * nb[j];
            let v = if denom > 0.0 {
                (dot(a.row(i), b.row(j)) / denom).clamp(-1.0, 1.0)
            } else {
                degenerate = true;
                0.0
            };
            matrix.set(i, j, v);
        }
    }
    Ok(CosineSimilarity { matrix, degenerate })
}

/// Gradients of [`cosine_rows`] with respect to `a` and `b`.
///
/// Zero-norm rows receive zero gradient.
pub fn cosine_rows_backward(a: &Matrix, b: &Matrix, ds: &Matrix) -> (Matrix, Matrix) {
    let na = row_norms(a);
    let nb = row_norms(b);
    let mut da = Matrix::zeros(a.rows(), a.cols());
    let mut db = Matrix::zeros(b.rows(), b.cols());
    let k = a.cols();
    for i in 0..a.rows() {
        if na[i] == 0.0 {
            continue;
        }
        for j in 0..b.rows() {
            if nb[j] == 0.0 {
                continue;
            }
            let g = ds.get(i, j);
            if g == 0.0 {
                continue;
            }
            let ai = a.row(i);
            let bj = b.row(j);
            let s = dot(ai, bj) / (na[i] * nb[j]);
            // ds/da_i = b_j / (|a||b|) - s * a_i / |a|^2
            let ca = g / (na[i] * nb[j]);
            let sa = g * s / (na[i] * na[i]);
            let cb = ca;
            let sb = g * s / (nb[j] * nb[j]);
            for t in 0..k {
                da.as_mut_slice()[i * k + t] += ca * bj[t] - sa * ai[t];
                db.as_mut_slice()[j * k + t] += cb * ai[t] - sb * bj[t];
            }
        }
    }
    (da, db)
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// Tanh-approximated GELU.
pub fn gelu(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}
