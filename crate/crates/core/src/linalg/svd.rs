//! Truncated SVD via one-sided (Hestenes) Jacobi rotations.
//!
//! Rotations act on the columns of whichever orientation has the smaller Gram
//! matrix, so the work is `O(min(m,n)² · max(m,n))` per sweep.

use serde::{Deserialize, Serialize};

use super::Matrix;
use crate::error::{Error, Result};

pub const MAX_SWEEPS: usize = 100;
/// Convergence threshold on the off-diagonal Gram mass, relative to `‖W‖_F²`.
pub const OFF_DIAGONAL_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SvdFactors {
    /// m×r, orthonormal columns.
    pub u: Matrix,
    /// Nonincreasing, nonnegative.
    pub s: Vec<f64>,
    /// n×r, orthonormal columns.
    pub v: Matrix,
}

impl SvdFactors {
    pub fn rank(&self) -> usize {
        self.s.len()
    }

    /// `U · diag(S) · Vᵀ`.
    pub fn reconstruct(&self) -> Matrix {
        let us = Matrix::from_fn(self.u.rows(), self.rank(), |i, j| {
            self.u.get(i, j) * self.s[j]
        });
        us.matmul_t(&self.v).expect("consistent factor shapes")
    }
}

/// Top-`r` singular triplets of `w`.
pub fn truncated_svd(w: &Matrix, r: usize) -> Result<SvdFactors> {
    let (m, n) = w.shape();
    let max_rank = m.min(n);
    if r == 0 || r > max_rank {
        return Err(Error::invalid(format!(
            "svd rank {r} out of range 1..={max_rank} for {m}x{n} matrix"
        )));
    }
    let full = if m >= n {
        jacobi_tall(w)?
    } else {
        let t = jacobi_tall(&w.transpose())?;
        SvdFactors {
            u: t.v,
            s: t.s,
            v: t.u,
        }
    };
    Ok(SvdFactors {
        u: full.u.leading_columns(r),
        s: full.s[..r].to_vec(),
        v: full.v.leading_columns(r),
    })
}

/// Full thin SVD of a tall (m ≥ n) matrix.
fn jacobi_tall(w: &Matrix) -> Result<SvdFactors> {
    let (m, n) = w.shape();
    // Work column-major: cols[j] is column j of the rotated matrix.
    let mut cols: Vec<Vec<f64>> = (0..n).map(|j| w.column(j)).collect();
    let mut vcols: Vec<Vec<f64>> = (0..n)
        .map(|j| (0..n).map(|i| if i == j { 1.0 } else { 0.0 }).collect())
        .collect();

    let norm2: f64 = w.data().iter().map(|x| x * x).sum();
    let mut converged = norm2 == 0.0;
    let mut residual = 0.0;
    let mut sweeps = 0;
    while !converged {
        if sweeps == MAX_SWEEPS {
            return Err(Error::NoConvergence { sweeps, residual });
        }
        sweeps += 1;
        let mut off = 0.0;
        for p in 0..n {
            for q in p + 1..n {
                let alpha = dot(&cols[p], &cols[p]);
                let beta = dot(&cols[q], &cols[q]);
                let gamma = dot(&cols[p], &cols[q]);
                off += gamma * gamma;
                if gamma == 0.0 || gamma.abs() <= f64::EPSILON * (alpha * beta).sqrt() {
                    continue;
                }
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate(&mut cols, p, q, c, s);
                rotate(&mut vcols, p, q, c, s);
            }
        }
        residual = off.sqrt() / norm2;
        converged = residual < OFF_DIAGONAL_TOL;
    }

    let mut sigma: Vec<f64> = cols.iter().map(|c| dot(c, c).sqrt()).collect();
    let mut order: Vec<usize> = (0..n).collect();
    // Stable sort keeps ties in column order, so output is deterministic.
    order.sort_by(|&a, &b| sigma[b].total_cmp(&sigma[a]));

    let smax = order.first().map_or(0.0, |&i| sigma[i]);
    let tiny = smax * (m.max(n) as f64) * f64::EPSILON;

    let mut ucols: Vec<Vec<f64>> = Vec::with_capacity(n);
    let mut vsorted: Vec<Vec<f64>> = Vec::with_capacity(n);
    let mut ssorted = Vec::with_capacity(n);
    let mut deficient = Vec::new();
    for &j in &order {
        let s = sigma[j];
        if s > tiny && s > 0.0 {
            ucols.push(cols[j].iter().map(|x| x / s).collect());
        } else {
            sigma[j] = 0.0;
            deficient.push(ucols.len());
            ucols.push(vec![0.0; m]);
        }
        ssorted.push(sigma[j]);
        vsorted.push(vcols[j].clone());
    }
    complete_basis(&mut ucols, &deficient);

    for (u, v) in ucols.iter_mut().zip(vsorted.iter_mut()) {
        let mut best = 0;
        for (i, x) in u.iter().enumerate() {
            if x.abs() > u[best].abs() {
                best = i;
            }
        }
        if u[best] < 0.0 {
            u.iter_mut().for_each(|x| *x = -*x);
            v.iter_mut().for_each(|x| *x = -*x);
        }
    }

    Ok(SvdFactors {
        u: Matrix::from_fn(m, n, |i, j| ucols[j][i]),
        s: ssorted,
        v: Matrix::from_fn(n, n, |i, j| vsorted[j][i]),
    })
}

/// Fill the zero columns listed in `missing` with unit vectors orthogonal to
/// every other column, via Gram-Schmidt over the standard basis.
fn complete_basis(cols: &mut [Vec<f64>], missing: &[usize]) {
    if missing.is_empty() {
        return;
    }
    let m = cols[0].len();
    let mut candidate = 0;
    for &slot in missing {
        loop {
            assert!(candidate < m, "cannot complete orthonormal basis");
            let mut e = vec![0.0; m];
            e[candidate] = 1.0;
            candidate += 1;
            for _ in 0..2 {
                for (k, c) in cols.iter().enumerate() {
                    if k == slot || c.iter().all(|&x| x == 0.0) {
                        continue;
                    }
                    let proj = dot(&e, c);
                    for (ei, ci) in e.iter_mut().zip(c) {
                        *ei -= proj * ci;
                    }
                }
            }
            let norm = dot(&e, &e).sqrt();
            if norm > 1e-6 {
                cols[slot] = e.iter().map(|x| x / norm).collect();
                break;
            }
        }
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn rotate(cols: &mut [Vec<f64>], p: usize, q: usize, c: f64, s: f64) {
    let (lo, hi) = cols.split_at_mut(q);
    let (cp, cq) = (&mut lo[p], &mut hi[0]);
    for (x, y) in cp.iter_mut().zip(cq.iter_mut()) {
        let (a, b) = (*x, *y);
        *x = c * a - s * b;
        *y = s * a + c * b;
    }
}
