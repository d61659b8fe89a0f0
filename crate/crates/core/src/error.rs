//! Error types shared across the crate.

use thiserror::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A caller passed a value that violates an operation's precondition.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A configuration combines settings that cannot run together.
    #[error("invalid configuration: {0}")]
    InvalidConfiguration(String),

    /// An operation was called before the state it needs exists.
    #[error("invalid state: {0}")]
    InvalidState(String),

    /// An internal contract was broken (e.g. eviction dropped a protected entry).
    #[error("contract violation: {0}")]
    ContractViolation(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("config parse error: {0}")]
    Parse(String),
}

/// Coarse error category, mapped onto process exit codes by the CLI.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorCategory {
    Config,
    Numeric,
    Io,
}

impl Error {
    pub fn category(&self) -> ErrorCategory {
        match self {
            Error::InvalidConfiguration(_) | Error::Parse(_) => ErrorCategory::Config,
            Error::InvalidArgument(_)
            | Error::InvalidState(_)
            | Error::ContractViolation(_) => ErrorCategory::Numeric,
            Error::Io(_) => ErrorCategory::Io,
        }
    }

    /// Process exit code for this category (0 is success).
    pub fn exit_code(&self) -> i32 {
        match self.category() {
            ErrorCategory::Config => 2,
            ErrorCategory::Numeric => 3,
            ErrorCategory::Io => 4,
        }
    }
}
