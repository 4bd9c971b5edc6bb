//! The soft-max gated mixture of Gaussian experts and its bounded parameter class.

mod density;
mod params;

pub use density::{
    gradient_envelope, log_density, log_density_gradient, log_softmax_gates, responsibility_matrix, sample,
    softmax_gates, PreparedModel,
};
pub use params::{affine_sup, ExpertParams, FlatLayout, GatingParams, ParameterBounds, SgameParams};
