use thiserror::Error;

/// Errors raised by operator construction, solvers and experiments.
#[derive(Debug, Error)]
pub enum LavregError {
    #[error("invalid dimension: {0}")]
    InvalidDimension(String),

    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: String, reason: String },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("range/nullspace decomposition failed: {0}")]
    DecompositionFailure(String),

    /// A root or band was not found inside the admissible parameter window.
    /// `trace` holds the (parameter, value) pairs visited by the search.
    #[error("window error: {message}")]
    Window {
        message: String,
        trace: Vec<(f64, f64)>,
    },

    #[error("undefined ratio: {0}")]
    UndefinedRatio(String),

    #[error("config error at `{path}`: {message}")]
    Config { path: String, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl LavregError {
    pub(crate) fn param(name: &str, reason: impl Into<String>) -> Self {
        LavregError::InvalidParameter {
            name: name.to_string(),
            reason: reason.into(),
        }
    }

    pub(crate) fn window(message: impl Into<String>, trace: Vec<(f64, f64)>) -> Self {
        LavregError::Window {
            message: message.into(),
            trace,
        }
    }
}

pub type Result<T> = std::result::Result<T, LavregError>;
