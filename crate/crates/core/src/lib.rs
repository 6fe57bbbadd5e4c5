//! Bayesian low-rank fine-tuning of small networks.
//!
//! Frozen backbones are adapted either with LoRA (`ΔW = A·B`, both trained)
//! or LoRA-XS (`ΔW = A·R·B` with `A`, `B` taken from the truncated SVD of the
//! host weight and only the r×r core `R` trained). The Bayesian variants fit
//! a SWAG posterior over the packed trainable vector θ and predict by model
//! averaging over posterior samples.

pub mod adapters;
pub mod error;
pub mod harness;
pub mod linalg;
pub mod metrics;
pub mod nn;
pub mod rng;
pub mod swag;
pub mod train;

#[cfg(test)]
mod testutil;

pub use adapters::{
    AdapterMode, AdapterModule, AdapterSet, JointParamVector, Method, ParamId, SiteId, SiteKind,
};
pub use error::{Error, Result};
pub use linalg::{kron, truncated_svd, Matrix, SvdFactors};
pub use metrics::{EvalResult, ReliabilityBin};
pub use nn::{Backbone, BackboneConfig, Batch};
pub use rng::{gaussian_vector, RngStream};
pub use swag::{SwagPosterior, SwagState};
