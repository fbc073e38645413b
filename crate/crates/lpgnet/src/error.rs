use thiserror::Error;

/// Error type shared by every module in the crate.
#[derive(Debug, Error)]
pub enum LpgError {
    /// Tensor shapes disagree for an operation.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// A documented precondition was violated.
    #[error("contract error: {0}")]
    Contract(String),

    /// A feature file line failed to parse.
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    /// File content disagrees with its own header or with the model.
    #[error("schema error: {0}")]
    Schema(String),

    /// Training produced a non-finite loss.
    #[error("divergence at epoch {epoch}, batch {batch}: loss = {loss}")]
    Divergence { epoch: usize, batch: usize, loss: f64 },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, LpgError>;

impl LpgError {
    pub fn dim(msg: impl Into<String>) -> Self {
        LpgError::Dimension(msg.into())
    }

    pub fn contract(msg: impl Into<String>) -> Self {
        LpgError::Contract(msg.into())
    }

    pub fn schema(msg: impl Into<String>) -> Self {
        LpgError::Schema(msg.into())
    }
}
