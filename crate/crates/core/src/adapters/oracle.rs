//! Dense test-scale oracles for the subspace structure. Production paths never
//! build these matrices.

use serde::{Deserialize, Serialize};

use super::module::{AdapterMode, AdapterModule, AdapterSet};
use super::params::SiteId;
use crate::error::{Error, Result};
use crate::linalg::{asymmetry, kron, Matrix};

/// Cap on the total flattened host-weight size handled by [`build_projector`].
pub const PROJECTOR_MAX_WEIGHTS: usize = 4096;

/// Block-diagonal `blockdiag(B_lᵀ ⊗ A_l)` over the sites of a LoRA-XS set, in
/// pack order. Maps packed cores to column-stacked updates (before scaling).
pub fn build_projector(adapters: &AdapterSet) -> Result<Matrix> {
    if adapters.head().is_some() {
        return Err(Error::invalid(
            "projector is undefined with a trainable head delta",
        ));
    }
    let mut rows = 0;
    let mut cols = 0;
    for m in adapters.modules() {
        if m.mode != AdapterMode::LoraXs {
            return Err(Error::invalid(format!(
                "site {} is not a LoRA-XS adapter",
                m.site
            )));
        }
        let (hm, hn) = m.host_shape();
        rows += hm * hn;
        cols += m.rank * m.rank;
    }
    if rows > PROJECTOR_MAX_WEIGHTS {
        return Err(Error::SizeCap {
            op: "build_projector",
            requested: rows,
            cap: PROJECTOR_MAX_WEIGHTS,
        });
    }
    let mut p = Matrix::zeros(rows, cols);
    let (mut r0, mut c0) = (0, 0);
    for m in adapters.modules() {
        let block = kron(&m.b.transpose(), &m.a)?;
        for i in 0..block.rows() {
            for j in 0..block.cols() {
                p.set(r0 + i, c0 + j, block.get(i, j));
            }
        }
        r0 += block.rows();
        c0 += block.cols();
    }
    Ok(p)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InducedCovariance {
    pub site: SiteId,
    /// (mn)×(mn) covariance of `vec(A·R·B)`.
    pub cov: Matrix,
}

/// Covariance of `vec(A·R·B)` when `vec(R) ~ N(·, Σ_R)`:
/// `(Bᵀ ⊗ A) Σ_R (Bᵀ ⊗ A)ᵀ`. The `alpha/r` scale is not applied.
pub fn induced_cov(adapter: &AdapterModule, sigma_r: &Matrix) -> Result<InducedCovariance> {
    let r2 = adapter.rank * adapter.rank;
    if sigma_r.shape() != (r2, r2) {
        return Err(Error::Shape {
            op: "induced_cov",
            left: (r2, r2),
            right: sigma_r.shape(),
        });
    }
    let asym = asymmetry(sigma_r);
    if asym > 1e-10 {
        return Err(Error::invalid(format!(
            "core covariance is not symmetric (max asymmetry {asym:e})"
        )));
    }
    let k = kron(&adapter.b.transpose(), &adapter.a)?;
    let cov = k.matmul(sigma_r)?.matmul_t(&k)?;
    // Symmetrize away rounding.
    let cov = Matrix::from_fn(cov.rows(), cov.cols(), |i, j| {
        0.5 * (cov.get(i, j) + cov.get(j, i))
    });
    Ok(InducedCovariance {
        site: adapter.site,
        cov,
    })
}
