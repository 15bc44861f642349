//! Error types shared across the crate.

use thiserror::Error;

/// Unified error type for every fallible operation in the crate.
#[derive(Error, Debug)]
pub enum EqInvError {
    /// Tensor shapes are incompatible with the requested operation.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// An operation was called outside its contract (non-scalar backward,
    /// too few environments, anchor count above class count, ...).
    #[error("contract violation: {0}")]
    Contract(String),

    /// A computation produced or received non-finite values, or a
    /// gradient check failed.
    #[error("numeric failure: {0}")]
    Numeric(String),

    /// A dataset / checkpoint / environment file is malformed.
    #[error("format error: {0}")]
    Format(String),

    /// A dataset spec or model/run configuration is invalid.
    #[error("config error: {0}")]
    Config(String),

    /// Dataset content violates an operation's preconditions
    /// (empty class, missing split, ...).
    #[error("data error: {0}")]
    Data(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl EqInvError {
    /// Process exit code used by the CLI: 1 usage/config, 2 data/format,
    /// 3 numeric failure.
    pub fn exit_code(&self) -> u8 {
        match self {
            EqInvError::Config(_) => 1,
            EqInvError::Format(_) | EqInvError::Data(_) | EqInvError::Io(_) => 2,
            EqInvError::Numeric(_) => 3,
            EqInvError::Shape(_) | EqInvError::Contract(_) => 3,
        }
    }
}

pub type Result<T> = std::result::Result<T, EqInvError>;
