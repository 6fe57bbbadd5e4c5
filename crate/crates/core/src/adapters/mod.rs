//! LoRA and LoRA-XS adapters, the joint parameter vector θ, subspace oracles
//! and parameter counting.

mod count;
mod module;
mod oracle;
mod params;

pub use count::{
    count_table, display_count, param_count, CountRow, Method, ShapePreset, REFERENCE_GRID,
};
pub(crate) use module::{AdapterCache, AdapterGrads};
pub use module::{AdapterMode, AdapterModule, AdapterSet, HeadDelta, DEFAULT_ALPHA, LORA_INIT_STD};
pub use oracle::{build_projector, induced_cov, InducedCovariance, PROJECTOR_MAX_WEIGHTS};
pub use params::{AdapterMatrix, JointParamVector, LayoutEntry, ParamId, SiteId, SiteKind};
