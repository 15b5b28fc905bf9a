//! Shared dense kernels.
//!
//! Both the autodiff tape and the plain tensor-level operations call into
//! these functions, so a value computed with or without gradient tracking
//! follows the identical sequence of floating-point operations.

use crate::error::{Error, Result};
use crate::tensor::Scalar;

/// out[m,n] = a[m,k] @ b[k,n]
pub fn matmul<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    out.fill(T::ZERO);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (kk, &av) in arow.iter().enumerate() {
            let brow = &b[kk * n..(kk + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
}

/// out[m,n] = a[m,k] @ b[n,k]^T  (rows of `a` dotted with rows of `b`)
pub fn matmul_nt<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = T::ZERO;
            for kk in 0..k {
                acc += arow[kk] * brow[kk];
            }
            out[i * n + j] = acc;
        }
    }
}

/// out[k,n] += a[m,k]^T @ g[m,n]   (weight-gradient accumulation)
pub fn matmul_tn_acc<T: Scalar>(a: &[T], g: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(g.len(), m * n);
    debug_assert_eq!(out.len(), k * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let grow = &g[i * n..(i + 1) * n];
        for (kk, &av) in arow.iter().enumerate() {
            let orow = &mut out[kk * n..(kk + 1) * n];
            for j in 0..n {
                orow[j] += av * grow[j];
            }
        }
    }
}

/// out[m,n] += a[m,k] @ b[k,n]
pub fn matmul_acc<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (kk, &av) in arow.iter().enumerate() {
            let brow = &b[kk * n..(kk + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
}

/// out[m,n] += a[m,k] @ b[n,k]^T
pub fn matmul_nt_acc<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = T::ZERO;
            for kk in 0..k {
                acc += arow[kk] * brow[kk];
            }
            out[i * n + j] += acc;
        }
    }
}

/// out[n,m] = a[m,n]^T
pub fn transpose<T: Scalar>(a: &[T], out: &mut [T], rows: usize, cols: usize) {
    debug_assert_eq!(a.len(), rows * cols);
    debug_assert_eq!(out.len(), rows * cols);
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
}

/// out = x[m,k] @ w[k,n] + b[n] broadcast over rows.
pub fn linear<T: Scalar>(x: &[T], w: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(b.len(), n);
    for i in 0..m {
        out[i * n..(i + 1) * n].copy_from_slice(b);
    }
    for i in 0..m {
        let xrow = &x[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (kk, &xv) in xrow.iter().enumerate() {
            let wrow = &w[kk * n..(kk + 1) * n];
            for j in 0..n {
                orow[j] += xv * wrow[j];
            }
        }
    }
}

/// Per-row mean/rstd statistics for layer normalization (biased variance).
pub fn layer_norm_stats<T: Scalar>(x: &[T], rows: usize, cols: usize, eps: T, mean: &mut [T], rstd: &mut [T]) {
    let nc = T::from_f64(cols as f64);
    for r in 0..rows {
        let row = &x[r * cols..(r + 1) * cols];
        let mut mu = T::ZERO;
        for &v in row {
            mu += v;
        }
        mu = mu / nc;
        let mut var = T::ZERO;
        for &v in row {
            let d = v - mu;
            var += d * d;
        }
        var = var / nc;
        mean[r] = mu;
        rstd[r] = T::ONE / (var + eps).sqrt_s();
    }
}

/// y = gamma * (x - mean) * rstd + beta, given precomputed stats.
pub fn layer_norm_apply<T: Scalar>(
    x: &[T],
    gamma: &[T],
    beta: &[T],
    mean: &[T],
    rstd: &[T],
    out: &mut [T],
    rows: usize,
    cols: usize,
) {
    for r in 0..rows {
        let row = &x[r * cols..(r + 1) * cols];
        let orow = &mut out[r * cols..(r + 1) * cols];
        let (mu, rs) = (mean[r], rstd[r]);
        for j in 0..cols {
            orow[j] = gamma[j] * ((row[j] - mu) * rs) + beta[j];
        }
    }
}

/// Row-wise softmax with max-subtraction. `allowed` restricts each row to a
/// subset of columns: blocked entries get weight exactly 0 and are never
/// touched by the reductions. `-inf` logits in allowed positions also yield
/// exactly 0. A row whose every allowed logit is `-inf` (or that has no
/// allowed column at all) is an error.
pub fn softmax_rows<T: Scalar>(
    logits: &[T],
    out: &mut [T],
    rows: usize,
    cols: usize,
    allowed: impl Fn(usize, usize) -> bool,
) -> Result<()> {
    for r in 0..rows {
        let lrow = &logits[r * cols..(r + 1) * cols];
        let orow = &mut out[r * cols..(r + 1) * cols];
        let mut max = T::NEG_INFINITY;
        let mut any = false;
        for j in 0..cols {
            if allowed(r, j) {
                any = true;
                max = max.max_s(lrow[j]);
            }
        }
        if !any {
            return Err(Error::AllKeysBlocked { row: r });
        }
        if !max.is_finite_s() {
            return Err(Error::AllBlocked { row: r });
        }
        let mut sum = T::ZERO;
        for j in 0..cols {
            if allowed(r, j) {
                let e = (lrow[j] - max).exp_s();
                orow[j] = e;
                sum += e;
            } else {
                orow[j] = T::ZERO;
            }
        }
        for j in 0..cols {
            if allowed(r, j) {
                orow[j] = orow[j] / sum;
            }
        }
    }
    Ok(())
}

/// weights[m,n] (rows summing to 1 with exact zeros at blocked entries)
/// times values[n,d]; blocked entries are skipped, so a row's output is a
/// function only of its allowed keys.
pub fn weighted_value_sum<T: Scalar>(
    weights: &[T],
    values: &[T],
    out: &mut [T],
    m: usize,
    n: usize,
    d: usize,
    allowed: impl Fn(usize, usize) -> bool,
) {
    out.fill(T::ZERO);
    for i in 0..m {
        let wrow = &weights[i * n..(i + 1) * n];
        let orow = &mut out[i * d..(i + 1) * d];
        for j in 0..n {
            if !allowed(i, j) {
                continue;
            }
            let wv = wrow[j];
            let vrow = &values[j * d..(j + 1) * d];
            for c in 0..d {
                orow[c] += wv * vrow[c];
            }
        }
    }
}

#[inline]
pub fn sigmoid<T: Scalar>(x: T) -> T {
    T::ONE / (T::ONE + (-x).exp_s())
}

#[inline]
pub fn silu<T: Scalar>(x: T) -> T {
    x * sigmoid(x)
}

/// Rotate channel pairs: pair i of each token is rotated by its angle.
/// `cos`/`sin` are [tokens, pairs].
pub fn rotate_pairs<T: Scalar>(x: &[T], cos: &[T], sin: &[T], out: &mut [T], tokens: usize, head_dim: usize) {
    let pairs = head_dim / 2;
    for t in 0..tokens {
        let xr = &x[t * head_dim..(t + 1) * head_dim];
        let or = &mut out[t * head_dim..(t + 1) * head_dim];
        let cr = &cos[t * pairs..(t + 1) * pairs];
        let sr = &sin[t * pairs..(t + 1) * pairs];
        for p in 0..pairs {
            let (x0, x1) = (xr[2 * p], xr[2 * p + 1]);
            or[2 * p] = x0 * cr[p] - x1 * sr[p];
            or[2 * p + 1] = x0 * sr[p] + x1 * cr[p];
        }
    }
}

/// Inverse rotation (transpose), used by the rotary backward pass.
pub fn rotate_pairs_inv<T: Scalar>(g: &[T], cos: &[T], sin: &[T], out: &mut [T], tokens: usize, head_dim: usize) {
    let pairs = head_dim / 2;
    for t in 0..tokens {
        let gr = &g[t * head_dim..(t + 1) * head_dim];
        let or = &mut out[t * head_dim..(t + 1) * head_dim];
        let cr = &cos[t * pairs..(t + 1) * pairs];
        let sr = &sin[t * pairs..(t + 1) * pairs];
        for p in 0..pairs {
            let (g0, g1) = (gr[2 * p], gr[2 * p + 1]);
            or[2 * p] = g0 * cr[p] + g1 * sr[p];
            or[2 * p + 1] = -g0 * sr[p] + g1 * cr[p];
        }
    }
}


#[cfg(test)]
mod perf_probe {
    use super::*;

    #[test]
    #[ignore = "kernel throughput probe"]
    fn matmul_throughput() {
        let (m, k, n) = (528, 16, 528);
        let a = vec![1.0f32; m * k];
        let b = vec![1.0f32; k * n];
        let mut out = vec![0.0f32; m * n];
        let t0 = std::time::Instant::now();
        let reps = 200;
        for _ in 0..reps {
            matmul(&a, &b, &mut out, m, k, n);
        }
        let dt = t0.elapsed().as_secs_f64();
        let gflops = (2.0 * m as f64 * k as f64 * n as f64 * reps as f64) / dt / 1e9;
        println!("matmul {m}x{k}x{n}: {gflops:.1} GFLOP/s");

        let (m2, k2, n2) = (528, 64, 256);
        let a = vec![1.0f32; m2 * k2];
        let b = vec![1.0f32; k2 * n2];
        let mut out = vec![0.0f32; m2 * n2];
        let t0 = std::time::Instant::now();
        for _ in 0..reps {
            matmul(&a, &b, &mut out, m2, k2, n2);
        }
        let dt = t0.elapsed().as_secs_f64();
        let gflops = (2.0 * m2 as f64 * k2 as f64 * n2 as f64 * reps as f64) / dt / 1e9;
        println!("matmul {m2}x{k2}x{n2}: {gflops:.1} GFLOP/s");

        // weighted value sum with trivial mask
        let probs = vec![0.01f32; 528 * 528];
        let values = vec![1.0f32; 528 * 16];
        let mut out = vec![0.0f32; 528 * 16];
        let t0 = std::time::Instant::now();
        for _ in 0..reps {
            weighted_value_sum(&probs, &values, &mut out, 528, 528, 16, |_, _| true);
        }
        let dt = t0.elapsed().as_secs_f64();
        let gflops = (2.0 * 528f64 * 528.0 * 16.0 * reps as f64) / dt / 1e9;
        println!("weighted_value_sum: {gflops:.1} GFLOP/s");

        // softmax
        let logits = vec![0.5f32; 528 * 528];
        let mut out = vec![0.0f32; 528 * 528];
        let t0 = std::time::Instant::now();
        for _ in 0..reps {
            softmax_rows(&logits, &mut out, 528, 528, |_, _| true).unwrap();
        }
        let dt = t0.elapsed().as_secs_f64();
        println!("softmax 528x528: {:.2} ms/call", dt / reps as f64 * 1000.0);
    }
}
