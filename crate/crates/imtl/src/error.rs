use thiserror::Error;

/// Errors produced by tensor operations, model fitting and I/O.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("degenerate factor: {0}")]
    DegenerateFactor(String),

    #[error("ill-conditioned solve: {0}")]
    IllConditioned(String),

    #[error("non-finite data: {0}")]
    NonFinite(String),

    #[error("labels contain a single class only")]
    DegenerateLabels,

    #[error("bad file format: {0}")]
    Format(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
