//! SWAG: running moments of θ along the optimizer trajectory, a ring of the
//! last `k` deviations, and a Gaussian with diagonal-plus-low-rank covariance.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::adapters::AdapterSet;
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::nn::{Backbone, Batch};
use crate::rng::RngStream;

pub const VARIANCE_FLOOR: f64 = 1e-12;
pub const DEFAULT_COV_RANK: usize = 10;
pub const DEFAULT_SAMPLES: usize = 15;
/// Largest |θ| for which [`posterior_cov_dense`] builds the dense matrix.
pub const DENSE_COV_MAX_DIM: usize = 512;

/// How the deviation block `D̂D̂ᵀ` is scaled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum CovNormalization {
    /// `Σ = ½·diag(σ̂²) + D̂D̂ᵀ/(2(k−1))`.
    #[default]
    KMinusOne,
    /// `Σ = ½·(diag(σ̂²) + D̂D̂ᵀ)`, no `1/(k−1)`.
    Unnormalized,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SwagState {
    pub n_collected: usize,
    pub mean: Vec<f64>,
    pub sq_mean: Vec<f64>,
    /// Oldest first.
    pub deviations: VecDeque<Vec<f64>>,
    pub k: usize,
}

impl SwagState {
    pub fn new(dim: usize, k: usize) -> Self {
        Self {
            n_collected: 0,
            mean: vec![0.0; dim],
            sq_mean: vec![0.0; dim],
            deviations: VecDeque::with_capacity(k),
            k,
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Fold one θ into the running moments and push `θ − μ̂` (updated mean).
    pub fn collect(&mut self, theta: &[f64]) -> Result<()> {
        if theta.len() != self.dim() {
            return Err(Error::invalid(format!(
                "swag collect: theta length {} != {}",
                theta.len(),
                self.dim()
            )));
        }
        self.n_collected += 1;
        let n = self.n_collected as f64;
        for ((m, s), &t) in self.mean.iter_mut().zip(&mut self.sq_mean).zip(theta) {
            *m += (t - *m) / n;
            *s += (t * t - *s) / n;
        }
        if self.k > 0 {
            if self.deviations.len() == self.k {
                self.deviations.pop_front();
            }
            self.deviations
                .push_back(theta.iter().zip(&self.mean).map(|(t, m)| t - m).collect());
        }
        Ok(())
    }

    pub fn finalize(&self) -> Result<SwagPosterior> {
        self.finalize_with(CovNormalization::default())
    }

    pub fn finalize_with(&self, normalization: CovNormalization) -> Result<SwagPosterior> {
        let need = if self.k == 0 { 1 } else { 2 };
        if self.n_collected < need {
            return Err(Error::InsufficientCollections {
                have: self.n_collected,
                need,
            });
        }
        let var = self
            .sq_mean
            .iter()
            .zip(&self.mean)
            .map(|(s, m)| (s - m * m).max(0.0).max(VARIANCE_FLOOR))
            .collect();
        let d = self.dim();
        let k_eff = self.deviations.len();
        let dev = Matrix::from_fn(d, k_eff, |i, j| self.deviations[j][i]);
        Ok(SwagPosterior {
            mean: self.mean.clone(),
            var,
            dev,
            normalization,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SwagPosterior {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    /// |θ|×k_eff deviation columns, oldest first.
    pub dev: Matrix,
    pub normalization: CovNormalization,
}

impl SwagPosterior {
    /// Degenerate posterior concentrated at θ.
    pub fn point_mass(theta: &[f64]) -> Self {
        Self {
            mean: theta.to_vec(),
            var: vec![0.0; theta.len()],
            dev: Matrix::zeros(theta.len(), 0),
            normalization: CovNormalization::default(),
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn k_eff(&self) -> usize {
        self.dev.cols()
    }

    /// `(diagonal scale, low-rank scale)` multiplying `σ̂⊙z₁` and `D̂z₂`.
    /// With fewer than two deviation columns the posterior is diagonal-only.
    fn scales(&self) -> (f64, f64) {
        let k = self.k_eff();
        if k < 2 {
            return (1.0, 0.0);
        }
        match self.normalization {
            CovNormalization::KMinusOne => (0.5f64.sqrt(), (2.0 * (k as f64 - 1.0)).sqrt().recip()),
            CovNormalization::Unnormalized => (0.5f64.sqrt(), 0.5f64.sqrt()),
        }
    }

    /// Trainable-parameter count of the posterior: mean, variance and the
    /// deviation columns.
    pub fn storage_len(&self) -> usize {
        self.dim() * (self.k_eff() + 2)
    }
}

/// Dense implied covariance. Test-scale only.
pub fn posterior_cov_dense(post: &SwagPosterior) -> Result<Matrix> {
    let d = post.dim();
    if d > DENSE_COV_MAX_DIM {
        return Err(Error::SizeCap {
            op: "posterior_cov_dense",
            requested: d,
            cap: DENSE_COV_MAX_DIM,
        });
    }
    if post.k_eff() == 1 {
        return Err(Error::invalid(
            "one deviation column cannot be normalized by k-1; sampling falls back to the diagonal",
        ));
    }
    let (a, b) = post.scales();
    let mut cov = post.dev.matmul_t(&post.dev)?;
    cov.scale_in_place(b * b);
    for i in 0..d {
        let v = cov.get(i, i) + a * a * post.var[i];
        cov.set(i, i, v);
    }
    Ok(cov)
}

/// `θ = μ̂ + a·σ̂⊙z₁ + b·D̂z₂` with `(a, b)` set by the normalization.
pub fn swag_sample(post: &SwagPosterior, rng: &mut RngStream) -> Vec<f64> {
    let (a, b) = post.scales();
    let mut theta: Vec<f64> = post
        .mean
        .iter()
        .zip(&post.var)
        .map(|(m, v)| m + a * v.sqrt() * rng.normal())
        .collect();
    if b != 0.0 {
        let z2: Vec<f64> = (0..post.k_eff()).map(|_| rng.normal()).collect();
        let low = post.dev.mul_vec(&z2).expect("k_eff-length draw");
        for (t, l) in theta.iter_mut().zip(low) {
            *t += b * l;
        }
    }
    theta
}

#[derive(Debug, Clone, PartialEq)]
pub struct PredictiveSummary {
    pub probs: Matrix,
    pub samples: usize,
}

/// Bayesian model averaging: mean of softmax probabilities over `samples`
/// θ draws. Sample `s` uses the child stream `rng.derive_index(s)`, so the
/// result does not depend on evaluation order.
pub fn bma_predict(
    net: &Backbone,
    adapters: &AdapterSet,
    post: &SwagPosterior,
    batch: &Batch,
    samples: usize,
    rng: &RngStream,
) -> Result<PredictiveSummary> {
    bma_predict_with(net, adapters, batch, samples, |s| {
        swag_sample(post, &mut rng.derive_index(s as u64))
    })
}

/// [`bma_predict`] with an arbitrary θ source.
pub fn bma_predict_with(
    net: &Backbone,
    adapters: &AdapterSet,
    batch: &Batch,
    samples: usize,
    mut sampler: impl FnMut(usize) -> Vec<f64>,
) -> Result<PredictiveSummary> {
    if samples == 0 {
        return Err(Error::invalid("bma needs at least one sample"));
    }
    let mut local = adapters.clone();
    let mut acc: Option<Matrix> = None;
    for s in 0..samples {
        local.unpack(&sampler(s))?;
        let p = net.predict_proba(batch, &local)?;
        match acc.as_mut() {
            Some(a) => a.add_assign(&p)?,
            None => acc = Some(p),
        }
    }
    let mut probs = acc.expect("samples > 0");
    probs.scale_in_place(1.0 / samples as f64);
    Ok(PredictiveSummary { probs, samples })
}
