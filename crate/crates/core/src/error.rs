use thiserror::Error;

/// Errors surfaced across the library.
#[derive(Debug, Error)]
pub enum NepError {
    /// Shapes or hyper-parameters that cannot work together.
    #[error("configuration error: {0}")]
    Config(String),
    /// Caller-supplied data that violates an operation's precondition.
    #[error("input error: {0}")]
    Input(String),
    /// A sequence layout that does not fit the model or the data it wraps.
    #[error("layout error: {0}")]
    Layout(String),
    /// A file or token stream that is not what it claims to be.
    #[error("corruption error: {0}")]
    Corruption(String),
    /// A cosine similarity against a zero vector.
    #[error("undefined similarity: {0}")]
    UndefinedSimilarity(String),
    /// A numerical routine that produced a non-finite value.
    #[error("numerical error: {0}")]
    Numeric(String),
    #[error("non-finite loss at step {step}: {detail}")]
    NonFiniteLoss { step: usize, detail: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Image(#[from] image::ImageError),
}

pub type Result<T, E = NepError> = std::result::Result<T, E>;
