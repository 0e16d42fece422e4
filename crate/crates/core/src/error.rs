use thiserror::Error;

/// Errors produced by the library.
#[derive(Debug, Error)]
pub enum RnnpError {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    /// A class has no support examples under the label source used to build prototypes.
    #[error("class {class} has no support examples")]
    DegenerateClass { class: usize },

    #[error("format error at line {line}: {message}")]
    Format { line: u64, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, RnnpError>;

pub(crate) fn invalid(msg: impl Into<String>) -> RnnpError {
    RnnpError::InvalidInput(msg.into())
}
