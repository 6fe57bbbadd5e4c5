//! Dense linear algebra used throughout the crate.

mod kron;
mod matrix;
mod svd;

pub use kron::{kron, kron_capped, KRON_MAX_ENTRIES};
pub use matrix::Matrix;
pub use svd::{truncated_svd, SvdFactors, MAX_SWEEPS, OFF_DIAGONAL_TOL};

/// Cholesky factorization of a symmetric positive-definite matrix.
///
/// Returns `None` if a pivot is not strictly positive.
pub fn cholesky(a: &Matrix) -> Option<Matrix> {
    let n = a.rows();
    if a.cols() != n {
        return None;
    }
    let mut l = Matrix::zeros(n, n);
    for j in 0..n {
        let mut d = a.get(j, j);
        for k in 0..j {
            d -= l.get(j, k).powi(2);
        }
        if d <= 0.0 || !d.is_finite() {
            return None;
        }
        let d = d.sqrt();
        l.set(j, j, d);
        for i in j + 1..n {
            let mut s = a.get(i, j);
            for k in 0..j {
                s -= l.get(i, k) * l.get(j, k);
            }
            l.set(i, j, s / d);
        }
    }
    Some(l)
}

/// Largest absolute asymmetry `|a_ij − a_ji|`.
pub fn asymmetry(a: &Matrix) -> f64 {
    let n = a.rows().min(a.cols());
    let mut worst = 0.0f64;
    for i in 0..n {
        for j in i + 1..n {
            worst = worst.max((a.get(i, j) - a.get(j, i)).abs());
        }
    }
    worst
}
