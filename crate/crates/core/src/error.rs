use std::io;

use thiserror::Error;

/// Errors raised by tensor kernels, models, metrics and the harness.
#[derive(Debug, Error)]
pub enum GmaError {
    #[error("shape error in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// A documented precondition was violated by the caller.
    #[error("contract violation in {op}: {msg}")]
    Contract { op: &'static str, msg: String },

    #[error("config error: {0}")]
    Config(String),

    /// A NaN or infinity appeared where finite values are required.
    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("i/o error: {0}")]
    Io(#[from] io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl GmaError {
    pub fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        GmaError::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub fn contract(op: &'static str, msg: impl Into<String>) -> Self {
        GmaError::Contract {
            op,
            msg: msg.into(),
        }
    }
}

pub type Result<T, E = GmaError> = std::result::Result<T, E>;
