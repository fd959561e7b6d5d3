use thiserror::Error;

/// Unified error type for the library. Numerical failures carry the timestep
/// they occurred at so multi-hundred-step traces stay debuggable.
#[derive(Debug, Error)]
pub enum PilqrError {
    /// Invalid configuration or malformed input (dimensions, bounds, schema).
    #[error("config error: {0}")]
    Config(String),

    /// Mismatched shapes between policies, batches, or fitted models.
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    /// A linear system that must be solvable was singular.
    #[error("singular system in {context} at timestep {t}")]
    Singular { context: &'static str, t: usize },

    /// Non-finite values or a failed factorization that regularization could
    /// not repair.
    #[error("numerical failure in {context} at timestep {t}: {msg}")]
    Numerical {
        context: &'static str,
        t: usize,
        msg: String,
    },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, PilqrError>;

impl PilqrError {
    pub fn config(msg: impl Into<String>) -> Self {
        PilqrError::Config(msg.into())
    }

    pub fn dim(msg: impl Into<String>) -> Self {
        PilqrError::Dimension(msg.into())
    }
}
