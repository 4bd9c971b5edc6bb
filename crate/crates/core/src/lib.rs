//! Soft-max gated mixture of Gaussian experts (SGaME) regression: the
//! conditional density, its Lasso-penalized maximum-likelihood estimator,
//! closed-form oracle-inequality constants and numerical checks of the
//! supporting lemmas.
//!
//! The model, divergence closed forms and bound constants are generic over
//! [`Scalar`] (`f32` or `f64`); the estimator and the verification harness
//! work in `f64`. Concrete aliases for both precisions live at the crate root.

pub mod bounds;
pub mod dataset;
pub mod divergence;
pub mod error;
pub mod estimator;
pub mod linalg;
pub mod model;
pub mod scalar;
pub mod verify;

pub use dataset::{uniform_design, Dataset};
pub use error::{Result, SgameError};
pub use linalg::Matrix;
pub use model::{
    gradient_envelope, log_density, log_density_gradient, sample, softmax_gates, ExpertParams, FlatLayout,
    GatingParams, ParameterBounds, PreparedModel, SgameParams,
};
pub use scalar::Scalar;

pub type Params = SgameParams<f64>;
pub type Params32 = SgameParams<f32>;
pub type Bounds = ParameterBounds<f64>;
pub type Bounds32 = ParameterBounds<f32>;
pub type Data = Dataset<f64>;
pub type Data32 = Dataset<f32>;
