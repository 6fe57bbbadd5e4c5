use super::Matrix;
use crate::error::{Error, Result};

/// Largest Kronecker product (in entries) [`kron`] will build.
pub const KRON_MAX_ENTRIES: usize = 1 << 24;

/// Kronecker product `a ⊗ b`. Intended as a test-scale oracle.
pub fn kron(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    kron_capped(a, b, KRON_MAX_ENTRIES)
}

pub fn kron_capped(a: &Matrix, b: &Matrix, max_entries: usize) -> Result<Matrix> {
    let (ma, na) = a.shape();
    let (mb, nb) = b.shape();
    let requested = ma * mb * na * nb;
    if requested > max_entries {
        return Err(Error::SizeCap {
            op: "kron",
            requested,
            cap: max_entries,
        });
    }
    Ok(Matrix::from_fn(ma * mb, na * nb, |i, j| {
        a.get(i / mb, j / nb) * b.get(i % mb, j % nb)
    }))
}
