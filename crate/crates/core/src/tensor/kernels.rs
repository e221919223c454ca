//! Slice-level numeric kernels. Reduction order is fixed so results are
//! bit-reproducible for identical inputs.

use super::Scalar;

/// `sqrt(2/π)`, the scale inside the tanh approximation of GELU.
pub const GELU_SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
/// Cubic coefficient of the tanh approximation of GELU.
pub const GELU_CUBIC: f64 = 0.044_715;

const MR: usize = 4;
const NR: usize = 8;

/// `out[m×n] += a[m×k] · b[k×n]`
///
/// Every output element accumulates its `k` products in index order,
/// starting from its previous value.
pub fn matmul_nn<F: Scalar>(a: &[F], b: &[F], m: usize, k: usize, n: usize, out: &mut [F]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    let mut i = 0;
    while i + MR <= m {
        row_block::<F, MR>(a, b, i, k, n, out);
        i += MR;
    }
    while i < m {
        row_block::<F, 1>(a, b, i, k, n, out);
        i += 1;
    }
}

#[inline(always)]
fn row_block<F: Scalar, const R: usize>(a: &[F], b: &[F], i0: usize, k: usize, n: usize, out: &mut [F]) {
    let a = &a[i0 * k..(i0 + R) * k];
    let mut j = 0;
    while j + NR <= n {
        let mut acc = [[F::ZERO; NR]; R];
        for (r, acc_r) in acc.iter_mut().enumerate() {
            acc_r.copy_from_slice(&out[(i0 + r) * n + j..(i0 + r) * n + j + NR]);
        }
        for t in 0..k {
            let bv: &[F; NR] = b[t * n + j..t * n + j + NR].try_into().expect("tile width");
            for (r, acc_r) in acc.iter_mut().enumerate() {
                let av = a[r * k + t];
                for c in 0..NR {
                    acc_r[c] += av * bv[c];
                }
            }
        }
        for (r, acc_r) in acc.iter().enumerate() {
            out[(i0 + r) * n + j..(i0 + r) * n + j + NR].copy_from_slice(acc_r);
        }
        j += NR;
    }
    for r in 0..R {
        for jj in j..n {
            let mut s = out[(i0 + r) * n + jj];
            for t in 0..k {
                s += a[r * k + t] * b[t * n + jj];
            }
            out[(i0 + r) * n + jj] = s;
        }
    }
}

/// Row-major transpose of an `r×c` matrix.
pub fn transpose<F: Scalar>(x: &[F], r: usize, c: usize) -> Vec<F> {
    let mut t = vec![F::ZERO; r * c];
    for i in 0..r {
        for j in 0..c {
            t[j * r + i] = x[i * c + j];
        }
    }
    t
}

/// `out[m×n] += a[m×k] · b[n×k]ᵀ`
pub fn matmul_nt<F: Scalar>(a: &[F], b: &[F], m: usize, k: usize, n: usize, out: &mut [F]) {
    debug_assert_eq!(b.len(), n * k);
    matmul_nn(a, &transpose(b, n, k), m, k, n, out);
}

/// `out[m×n] += a[k×m]ᵀ · b[k×n]`
pub fn matmul_tn<F: Scalar>(a: &[F], b: &[F], k: usize, m: usize, n: usize, out: &mut [F]) {
    debug_assert_eq!(a.len(), k * m);
    matmul_nn(&transpose(a, k, m), b, m, k, n, out);
}

#[inline]
pub fn dot<F: Scalar>(a: &[F], b: &[F]) -> F {
    // Four independent accumulators, combined in a fixed order.
    let mut acc = [F::ZERO; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        let i = c * 4;
        acc[0] += a[i] * b[i];
        acc[1] += a[i + 1] * b[i + 1];
        acc[2] += a[i + 2] * b[i + 2];
        acc[3] += a[i + 3] * b[i + 3];
    }
    let mut tail = F::ZERO;
    for i in chunks * 4..a.len() {
        tail += a[i] * b[i];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

#[inline]
pub fn gelu<F: Scalar>(x: F) -> F {
    let c = F::from_f64(GELU_SQRT_2_OVER_PI);
    let k = F::from_f64(GELU_CUBIC);
    let half = F::from_f64(0.5);
    half * x * (F::ONE + (c * (x + k * x * x * x)).tanh())
}

/// Derivative of [`gelu`].
#[inline]
pub fn gelu_grad(x: f64) -> f64 {
    let u = GELU_SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x);
    let t = u.tanh();
    let du = GELU_SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_CUBIC * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

/// Row-wise softmax with per-row max subtraction. Returns `false` if any
/// input is NaN.
pub fn softmax_rows<F: Scalar>(x: &[F], rows: usize, cols: usize, out: &mut [F]) -> bool {
    for r in 0..rows {
        let row = &x[r * cols..(r + 1) * cols];
        let mut max = row[0];
        for &v in row {
            if v.to_f64().is_nan() {
                return false;
            }
            if v > max {
                max = v;
            }
        }
        let dst = &mut out[r * cols..(r + 1) * cols];
        let mut sum = F::ZERO;
        for (o, &v) in dst.iter_mut().zip(row) {
            *o = (v - max).exp();
            sum += *o;
        }
        let inv = F::ONE / sum;
        for o in dst.iter_mut() {
            *o *= inv;
        }
    }
    true
}

/// Per-row layer normalization. Writes the normalized-but-unscaled rows
/// into `xhat` and each row's `1/sqrt(var + eps)` into `inv_std`.
#[allow(clippy::too_many_arguments)]
pub fn layernorm<F: Scalar>(
    x: &[F],
    gain: &[F],
    bias: &[F],
    rows: usize,
    cols: usize,
    eps: f64,
    out: &mut [F],
    mut xhat: Option<&mut [F]>,
    mut inv_std: Option<&mut [F]>,
) {
    let n = F::from_f64(cols as f64);
    let eps = F::from_f64(eps);
    for r in 0..rows {
        let row = &x[r * cols..(r + 1) * cols];
        let mut mean = F::ZERO;
        for &v in row {
            mean += v;
        }
        mean = mean / n;
        let mut var = F::ZERO;
        for &v in row {
            let d = v - mean;
            var += d * d;
        }
        var = var / n;
        let istd = F::ONE / (var + eps).sqrt();
        if let Some(s) = inv_std.as_deref_mut() {
            s[r] = istd;
        }
        let dst = &mut out[r * cols..(r + 1) * cols];
        for j in 0..cols {
            let h = (row[j] - mean) * istd;
            if let Some(xh) = xhat.as_deref_mut() {
                xh[r * cols + j] = h;
            }
            dst[j] = h * gain[j] + bias[j];
        }
    }
}

/// Input gradient of layer normalization given the cached `xhat` and
/// `inv_std`; also accumulates gain and bias gradients when requested.
#[allow(clippy::too_many_arguments)]
pub fn layernorm_backward(
    dy: &[f64],
    xhat: &[f64],
    inv_std: &[f64],
    gain: &[f64],
    rows: usize,
    cols: usize,
    dx: Option<&mut [f64]>,
    dgain: Option<&mut [f64]>,
    dbias: Option<&mut [f64]>,
) {
    if let Some(dg) = dgain {
        for r in 0..rows {
            for j in 0..cols {
                dg[j] += dy[r * cols + j] * xhat[r * cols + j];
            }
        }
    }
    if let Some(db) = dbias {
        for r in 0..rows {
            for j in 0..cols {
                db[j] += dy[r * cols + j];
            }
        }
    }
    if let Some(dx) = dx {
        let n = cols as f64;
        for r in 0..rows {
            let mut mean_d = 0.0;
            let mut mean_dx = 0.0;
            for j in 0..cols {
                let d = dy[r * cols + j] * gain[j];
                mean_d += d;
                mean_dx += d * xhat[r * cols + j];
            }
            mean_d /= n;
            mean_dx /= n;
            for j in 0..cols {
                let d = dy[r * cols + j] * gain[j];
                dx[r * cols + j] += inv_std[r] * (d - mean_d - xhat[r * cols + j] * mean_dx);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn three_matmul_layouts_agree() {
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0]; // 2x3
        let b = [7.0, 8.0, 9.0, 10.0, 11.0, 12.0]; // 3x2
        let mut nn = [0.0; 4];
        matmul_nn(&a, &b, 2, 3, 2, &mut nn);
        assert_eq!(nn, [58.0, 64.0, 139.0, 154.0]);

        let bt = [7.0, 9.0, 11.0, 8.0, 10.0, 12.0]; // bᵀ as 2x3
        let mut nt = [0.0; 4];
        matmul_nt(&a, &bt, 2, 3, 2, &mut nt);
        assert_eq!(nt, nn);

        let at = [1.0, 4.0, 2.0, 5.0, 3.0, 6.0]; // aᵀ as 3x2
        let mut tn = [0.0; 4];
        matmul_tn(&at, &b, 3, 2, 2, &mut tn);
        assert_eq!(tn, nn);
    }

    #[test]
    fn gelu_fixed_point_and_slope() {
        assert_eq!(gelu(0.0f64), 0.0);
        assert!((gelu_grad(0.0) - 0.5).abs() < 1e-15);
        let h = 1e-6;
        for x in [-2.0, -0.3, 0.7, 3.1] {
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8);
        }
    }

    #[test]
    fn softmax_rejects_nan() {
        let mut out = [0.0; 2];
        assert!(!softmax_rows(&[f64::NAN, 1.0], 1, 2, &mut out));
    }
}
