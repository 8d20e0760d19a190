//! Slice-level numeric kernels shared by the tape and the incremental
//! decoder, so both paths run the same arithmetic.

/// `c (m×n) = op(a) · op(b)` (or `+=` when `accumulate`).
///
/// `a` is logically `m×k`; when `a_t` it is stored as `k×m`. `b` is logically
/// `k×n`; when `b_t` it is stored as `n×k`.
#[allow(clippy::too_many_arguments)]
pub fn gemm(m: usize, k: usize, n: usize, a: &[f64], a_t: bool, b: &[f64], b_t: bool, c: &mut [f64], accumulate: bool) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c.iter_mut().for_each(|v| *v = 0.0);
        }
        return;
    }
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the strides describe exactly the m×k, k×n and m×n extents of
    // slices whose lengths are checked above.
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

pub fn matmul(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], b_t: bool) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    gemm(m, k, n, a, false, b, b_t, &mut c, false);
    c
}

/// Row-wise softmax with max subtraction. Entries where `allowed` is false
/// get probability zero; a row with nothing allowed is all zeros.
pub fn softmax_rows(x: &[f64], cols: usize, allowed: Option<&[bool]>) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for (r, (xr, or)) in x.chunks(cols).zip(out.chunks_mut(cols)).enumerate() {
        let mask = allowed.map(|m| &m[r * cols..(r + 1) * cols]);
        let ok = |j: usize| mask.is_none_or(|m| m[j]);
        let mut max = f64::NEG_INFINITY;
        for (j, &v) in xr.iter().enumerate() {
            if ok(j) && v > max {
                max = v;
            }
        }
        if max == f64::NEG_INFINITY {
            continue;
        }
        let mut sum = 0.0;
        for (j, (&v, o)) in xr.iter().zip(or.iter_mut()).enumerate() {
            if ok(j) {
                *o = (v - max).exp();
                sum += *o;
            }
        }
        or.iter_mut().for_each(|o| *o /= sum);
    }
    out
}

pub fn log_softmax_rows(x: &[f64], cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for (xr, or) in x.chunks(cols).zip(out.chunks_mut(cols)) {
        let lse = log_sum_exp(xr);
        for (o, &v) in or.iter_mut().zip(xr) {
            *o = v - lse;
        }
    }
    out
}

pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    max + xs.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Per-row normalisation. Returns `(y, xhat, inv_std)`.
pub fn layer_norm_rows(x: &[f64], cols: usize, gain: &[f64], bias: &[f64], eps: f64) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let rows = x.len() / cols;
    let mut y = vec![0.0; x.len()];
    let mut xhat = vec![0.0; x.len()];
    let mut inv_std = vec![0.0; rows];
    for r in 0..rows {
        let xr = &x[r * cols..(r + 1) * cols];
        let mean = xr.iter().sum::<f64>() / cols as f64;
        let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
        let is = 1.0 / (var + eps).sqrt();
        inv_std[r] = is;
        for j in 0..cols {
            let h = (xr[j] - mean) * is;
            xhat[r * cols + j] = h;
            y[r * cols + j] = h * gain[j] + bias[j];
        }
    }
    (y, xhat, inv_std)
}

pub fn add_row_inplace(x: &mut [f64], row: &[f64]) {
    for xr in x.chunks_mut(row.len()) {
        for (v, b) in xr.iter_mut().zip(row) {
            *v += b;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(m: usize, k: usize, n: usize, a: &[f64], b: &[f64]) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0;
                for p in 0..k {
                    s += a[i * k + p] * b[p * n + j];
                }
                c[i * n + j] = s;
            }
        }
        c
    }

    #[test]
    fn gemm_transposes_agree_with_naive() {
        let (m, k, n) = (3, 4, 5);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.11).cos()).collect();
        let want = naive(m, k, n, &a, &b);
        let mut at = vec![0.0; k * m];
        for i in 0..m {
            for p in 0..k {
                at[p * m + i] = a[i * k + p];
            }
        }
        let mut bt = vec![0.0; n * k];
        for p in 0..k {
            for j in 0..n {
                bt[j * k + p] = b[p * n + j];
            }
        }
        for (a_t, b_t) in [(false, false), (true, false), (false, true), (true, true)] {
            let mut c = vec![0.0; m * n];
            let aa = if a_t { &at } else { &a };
            let bb = if b_t { &bt } else { &b };
            gemm(m, k, n, aa, a_t, bb, b_t, &mut c, false);
            for (x, y) in c.iter().zip(&want) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn masked_softmax_zeroes_disallowed() {
        let p = softmax_rows(&[1.0, 2.0, 3.0], 3, Some(&[true, false, true]));
        assert_eq!(p[1], 0.0);
        assert!((p[0] + p[2] - 1.0).abs() < 1e-15);
        let none = softmax_rows(&[1.0, 2.0], 2, Some(&[false, false]));
        assert_eq!(none, vec![0.0, 0.0]);
    }
}
