#![allow(dead_code)]

use blxs_core::{Matrix, RngStream};

pub fn random(rng: &mut RngStream, r: usize, c: usize) -> Matrix {
    Matrix::from_fn(r, c, |_, _| rng.normal())
}

/// Column-stacking vectorization written against raw indices.
pub fn vec_of(m: &Matrix) -> Vec<f64> {
    let mut out = Vec::with_capacity(m.len());
    for j in 0..m.cols() {
        for i in 0..m.rows() {
            out.push(m.get(i, j));
        }
    }
    out
}

/// Kronecker product as nested loops over the definition.
pub fn naive_kron(a: &Matrix, b: &Matrix) -> Vec<Vec<f64>> {
    let (p, q) = b.shape();
    let mut out = vec![vec![0.0; a.cols() * q]; a.rows() * p];
    for i in 0..a.rows() {
        for j in 0..a.cols() {
            for k in 0..p {
                for l in 0..q {
                    out[i * p + k][j * q + l] = a.get(i, j) * b.get(k, l);
                }
            }
        }
    }
    out
}

pub fn dense_product(a: &Matrix, b: &Matrix) -> Matrix {
    Matrix::from_fn(a.rows(), b.cols(), |i, j| {
        (0..a.cols()).map(|k| a.get(i, k) * b.get(k, j)).sum()
    })
}

/// ‖a − b‖_F / ‖b‖_F.
pub fn rel_frobenius(a: &Matrix, b: &Matrix) -> f64 {
    let num: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).powi(2))
        .sum();
    let den: f64 = b.data().iter().map(|y| y * y).sum();
    (num / den).sqrt()
}

/// Lower-triangular L with L·Lᵀ = a, jittered on the diagonal for
/// semidefinite inputs.
pub fn cholesky_jittered(a: &Matrix) -> Matrix {
    let n = a.rows();
    let mut l = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let mut s = a.get(i, j);
            for k in 0..j {
                s -= l[i * n + k] * l[j * n + k];
            }
            if i == j {
                l[i * n + i] = s.max(1e-300).sqrt();
            } else {
                l[i * n + j] = s / l[j * n + j];
            }
        }
    }
    Matrix::new(n, n, l).unwrap()
}

/// Sample covariance with the sample mean removed, using Welford-free
/// two-pass accumulation over a draw closure.
pub fn empirical_cov(dim: usize, n: usize, mut draw: impl FnMut() -> Vec<f64>) -> Matrix {
    let mut sum = vec![0.0; dim];
    let mut outer = vec![0.0; dim * dim];
    for _ in 0..n {
        let x = draw();
        for i in 0..dim {
            sum[i] += x[i];
            for j in 0..=i {
                outer[i * dim + j] += x[i] * x[j];
            }
        }
    }
    let nf = n as f64;
    Matrix::from_fn(dim, dim, |i, j| {
        let (a, b) = if j <= i { (i, j) } else { (j, i) };
        (outer[a * dim + b] - sum[a] * sum[b] / nf) / (nf - 1.0)
    })
}
