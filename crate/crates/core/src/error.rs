use alloc::string::String;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("index out of grid: {index} not in 0..{len}")]
    IndexOutOfGrid { index: usize, len: usize },
    #[error("invalid noise level {0}")]
    InvalidSigma(f64),
    #[error("gamma undefined above sigma_max ({sigma} > {sigma_max})")]
    GammaAboveMax { sigma: f64, sigma_max: f64 },
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("covariance is not positive definite (component {0})")]
    NotPositiveDefinite(usize),
    #[error("posterior underflow")]
    PosteriorUnderflow,
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("backward called without a cached forward pass")]
    NoForwardPass,
    #[error("malformed layout: {0}")]
    MalformedLayout(String),
    #[error("operation requires mode {expected}, model is in mode {got}")]
    WrongMode { expected: &'static str, got: &'static str },
    #[error("empty batch")]
    EmptyBatch,
    #[error("sampler diverged at step {step}")]
    Diverged { step: usize },
    #[error("contact resolution failed")]
    ContactResolutionFailed,
    #[error("initialization infeasible after {0} rejections")]
    InitializationInfeasible(usize),
    #[error("empty point set")]
    EmptySet,
    #[error("missing trajectory")]
    MissingTrajectory,
}
