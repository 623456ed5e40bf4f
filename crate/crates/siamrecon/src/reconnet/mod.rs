//! The differentiable unrolled proximal-gradient reconstructor.

pub mod conv;
pub mod forward;
pub mod params;

pub use forward::{
    hard_dc, ista_phase, loss_and_grads, reconstruct, soft_threshold, symmetry_penalty,
    FeatureMap, ReconTape,
};
pub use params::{ParamGrads, PhaseParams, Provenance, ReconParams, TransformWeights, THRESHOLD_FLOOR};

pub(crate) use forward::forward_taped;
