use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shapes that do not fit together.
    #[error("dimension error in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    /// Invalid configuration detected before any compute.
    #[error("configuration error: {0}")]
    Config(String),

    /// API misuse, e.g. backward on a non-scalar.
    #[error("usage error: {0}")]
    Usage(String),

    /// Malformed binary container.
    #[error("format error at byte {offset}: {detail}")]
    Format { offset: u64, detail: String },

    /// Data that violates a content rule (non-binary mask, non-finite values).
    #[error("validation error: {0}")]
    Validation(String),

    /// A non-finite value appeared during training.
    #[error("non-finite value produced by op `{op}` (node {node})")]
    NonFinite { op: &'static str, node: usize },

    #[error("schema error in field `{field}`: {detail}")]
    Schema { field: String, detail: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension {
            op,
            detail: detail.into(),
        }
    }
}
