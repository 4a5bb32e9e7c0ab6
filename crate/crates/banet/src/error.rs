use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    /// A caller violated an operation precondition (shape mismatch, bad
    /// hyperparameter, out-of-range label, ...). The message names the
    /// offending dimension or coordinate.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A file did not match its format grammar. `offset` is the byte at
    /// which decoding failed.
    #[error("format error at byte {offset}: {msg}")]
    Format { offset: usize, msg: String },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

/// Shorthand for `Error::InvalidArgument` with a formatted message.
macro_rules! invalid {
    ($($arg:tt)*) => {
        return Err($crate::error::Error::InvalidArgument(format!($($arg)*)))
    };
}

macro_rules! ensure {
    ($cond:expr, $($arg:tt)*) => {
        if !$cond {
            return Err($crate::error::Error::InvalidArgument(format!($($arg)*)));
        }
    };
}

pub(crate) use {ensure, invalid};
