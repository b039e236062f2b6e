use thiserror::Error;

pub type Result<T, E = GbmapError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum GbmapError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid state: {0}")]
    InvalidState(String),

    /// A problem with input data, located at a 1-based data row and a column name.
    #[error("data error at row {row}, column '{column}': {message}")]
    Ingest { row: usize, column: String, message: String },

    #[error("data error: {0}")]
    Data(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("undefined metric: {0}")]
    Undefined(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl GbmapError {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        GbmapError::InvalidArgument(msg.into())
    }

    pub(crate) fn dim_mismatch(what: &str, expected: usize, got: usize) -> Self {
        GbmapError::InvalidArgument(format!("{what}: expected dimension {expected}, got {got}"))
    }
}
