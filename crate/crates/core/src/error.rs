use thiserror::Error;

pub type Result<T> = std::result::Result<T, SgameError>;

#[derive(Debug, Error)]
pub enum SgameError {
    #[error("dimension mismatch for {what}: expected {expected}, found {found}")]
    DimensionMismatch {
        what: String,
        expected: usize,
        found: usize,
    },

    #[error("covariance of component {component} is not symmetric positive definite")]
    NotPositiveDefinite { component: usize },

    #[error("matrix argument `{0}` is not symmetric positive definite")]
    NotSpd(&'static str),

    #[error("invalid parameter bounds: {0}")]
    InvalidBounds(String),

    #[error("parameter violates bound constraint: {0}")]
    BoundViolation(String),

    #[error("invalid dataset: {0}")]
    InvalidDataset(String),

    #[error("regularization parameter must be nonnegative, got {0}")]
    NegativeLambda(f64),

    #[error("lambda = {lambda} is below the theorem minimum {minimum}")]
    LambdaBelowMinimum { lambda: f64, minimum: f64 },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("quadrature KL is only available for one-dimensional responses (q = {0})")]
    QuadratureDimension(usize),

    #[error("component {component} received total responsibility {mass:e}{}", restart.map(|r| format!(" (restart {r})")).unwrap_or_default())]
    EmptyComponent {
        component: usize,
        mass: f64,
        restart: Option<usize>,
    },

    #[error("all {restarts} restarts failed; first error: {first}")]
    AllRestartsFailed { restarts: usize, first: String },

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl SgameError {
    pub(crate) fn dim(what: impl Into<String>, expected: usize, found: usize) -> Self {
        SgameError::DimensionMismatch {
            what: what.into(),
            expected,
            found,
        }
    }

    pub(crate) fn with_restart(self, restart: usize) -> Self {
        match self {
            SgameError::EmptyComponent {
                component, mass, ..
            } => SgameError::EmptyComponent {
                component,
                mass,
                restart: Some(restart),
            },
            other => other,
        }
    }
}
