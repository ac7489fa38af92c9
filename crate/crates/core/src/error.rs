use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("numeric failure at sigma={sigma:e}: {context}")]
    NonFiniteAtSigma { sigma: f64, context: String },

    #[error("numeric failure at step {step}: {context}")]
    NonFiniteAtStep { step: usize, context: String },

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("backend unavailable: {0}")]
    BackendUnavailable(String),

    #[error("degenerate codebook: requested {requested} clusters but data has only {distinct} distinct points")]
    DegenerateCodebook { requested: usize, distinct: usize },

    #[error("not ready: {0}")]
    NotReady(String),

    #[error("incompatible checkpoint: {0}")]
    IncompatibleCheckpoint(String),

    #[error("configuration error: {0}")]
    Configuration(String),

    #[error("corrupt cache {path}: {reason}")]
    CacheCorrupt { path: PathBuf, reason: String },

    #[error("config hash mismatch: checkpoint was written by {found}, current config is {expected}")]
    ConfigMismatch { expected: String, found: String },

    #[error("ill-conditioned covariance: {0}")]
    IllConditioned(String),

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}
