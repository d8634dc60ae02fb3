use std::io;

use thiserror::Error;

/// Errors raised across the crate.
#[derive(Debug, Error)]
pub enum MindError {
    /// A precondition of an operation was violated by the caller.
    #[error("contract violation: {0}")]
    Contract(String),
    /// A non-finite value appeared in a forward pass.
    #[error("non-finite value produced by node {node} ({op})")]
    Numeric { node: usize, op: &'static str },
    /// Input data without enough spread for the requested analysis.
    #[error("degenerate input: {0}")]
    Degenerate(String),
    /// A file that does not follow the expected binary or text layout.
    #[error("format error: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T, E = MindError> = std::result::Result<T, E>;

/// Shorthand for returning a contract violation.
macro_rules! contract {
    ($($arg:tt)*) => {
        return Err($crate::error::MindError::Contract(format!($($arg)*)))
    };
}
pub(crate) use contract;

/// Returns a contract violation unless the condition holds.
macro_rules! ensure {
    ($cond:expr, $($arg:tt)*) => {
        if !$cond {
            $crate::error::contract!($($arg)*);
        }
    };
}
pub(crate) use ensure;
