//! Small dense factorizations: real Cholesky and complex Householder QR.
//! Matrices are row-major slices.

use crate::error::{Error, Result};
use crate::tensor::C64;

/// Overwrites the lower triangle of the symmetric positive-definite `a`
/// (`n×n`) with its Cholesky factor `L`, `a = L·Lᵀ`.
pub fn cholesky_in_place(a: &mut [f64], n: usize) -> Result<()> {
    if a.len() != n * n {
        return Err(Error::shape("cholesky", &[a.len()], &[n, n]));
    }
    for j in 0..n {
        let row_j = &a[j * n..][..j];
        let d = a[j * n + j] - dot(row_j, row_j);
        if !(d > 0.0) || !d.is_finite() {
            return Err(Error::Conditioning(format!("matrix is not positive definite at pivot {j} ({d:e})")));
        }
        let d = d.sqrt();
        a[j * n + j] = d;
        for i in j + 1..n {
            let s = a[i * n + j] - dot(&a[i * n..][..j], &a[j * n..][..j]);
            a[i * n + j] = s / d;
        }
    }
    Ok(())
}

/// Dot product with independent partial sums so the loop vectorizes.
fn dot(x: &[f64], y: &[f64]) -> f64 {
    let mut acc = [0.0; 8];
    let (xc, yc) = (x.chunks_exact(8), y.chunks_exact(8));
    let tail: f64 = xc.remainder().iter().zip(yc.remainder()).map(|(p, q)| p * q).sum();
    for (p, q) in xc.zip(yc) {
        for k in 0..8 {
            acc[k] += p[k] * q[k];
        }
    }
    acc.iter().sum::<f64>() + tail
}

/// Solves `L·Lᵀ·X = B` in place for `B: [n×m]`, given the factor from
/// [`cholesky_in_place`].
pub fn cholesky_solve(l: &[f64], n: usize, b: &mut [f64], m: usize) {
    for c in 0..m {
        for i in 0..n {
            let mut s = b[i * m + c];
            for k in 0..i {
                s -= l[i * n + k] * b[k * m + c];
            }
            b[i * m + c] = s / l[i * n + i];
        }
        for i in (0..n).rev() {
            let mut s = b[i * m + c];
            for k in i + 1..n {
                s -= l[k * n + i] * b[k * m + c];
            }
            b[i * m + c] = s / l[i * n + i];
        }
    }
}

/// Relative pivot size below which a triangular factor counts as singular.
pub const RANK_TOLERANCE: f64 = 1e-10;

/// Least-squares solution of `A·X ≈ B` with `A: [rows×cols]`, `rows ≥ cols`,
/// `B: [rows×m]`, by Householder QR. Returns `X: [cols×m]`.
pub fn complex_least_squares(a: &[C64], rows: usize, cols: usize, b: &[C64], m: usize) -> Result<Vec<C64>> {
    if a.len() != rows * cols || b.len() != rows * m {
        return Err(Error::shape("least_squares", &[rows, cols], &[b.len() / rows.max(1), m]));
    }
    if rows < cols {
        return Err(Error::Conditioning(format!("{rows} equations for {cols} unknowns")));
    }
    let mut r = a.to_vec();
    let mut q = b.to_vec();
    let mut diag_max: f64 = 0.0;
    for k in 0..cols {
        let norm = (k..rows).map(|i| r[i * cols + k].norm_sqr()).sum::<f64>().sqrt();
        if norm == 0.0 {
            continue;
        }
        let x0 = r[k * cols + k];
        let phase = if x0.norm() > 0.0 { x0 / x0.norm() } else { C64::new(1.0, 0.0) };
        let alpha = -phase * norm;
        // v = x − α·e₁, reflector I − 2vvᴴ/‖v‖².
        let mut v: Vec<C64> = (k..rows).map(|i| r[i * cols + k]).collect();
        v[0] -= alpha;
        let vn: f64 = v.iter().map(|z| z.norm_sqr()).sum();
        if vn == 0.0 {
            continue;
        }
        for c in k..cols {
            let dot: C64 = v.iter().enumerate().map(|(t, vi)| vi.conj() * r[(k + t) * cols + c]).sum();
            let f = dot * (2.0 / vn);
            for (t, vi) in v.iter().enumerate() {
                r[(k + t) * cols + c] -= vi * f;
            }
        }
        for c in 0..m {
            let dot: C64 = v.iter().enumerate().map(|(t, vi)| vi.conj() * q[(k + t) * m + c]).sum();
            let f = dot * (2.0 / vn);
            for (t, vi) in v.iter().enumerate() {
                q[(k + t) * m + c] -= vi * f;
            }
        }
        diag_max = diag_max.max(r[k * cols + k].norm());
    }
    for k in 0..cols {
        let d = r[k * cols + k].norm();
        if !(d > RANK_TOLERANCE * diag_max) {
            return Err(Error::Conditioning(format!(
                "rank deficient: pivot {k} is {d:e} against largest {diag_max:e}"
            )));
        }
    }
    let mut x = vec![C64::new(0.0, 0.0); cols * m];
    for c in 0..m {
        for i in (0..cols).rev() {
            let mut s = q[i * m + c];
            for k in i + 1..cols {
                s -= r[i * cols + k] * x[k * m + c];
            }
            x[i * m + c] = s / r[i * cols + i];
        }
    }
    Ok(x)
}
