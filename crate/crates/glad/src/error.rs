//! Crate-wide error type.
//!
//! Errors fall into three categories that the CLI maps onto process exit
//! codes: usage problems (bad flags or config values, exit 2), data problems
//! (unreadable or malformed inputs and artifacts, exit 3), and numeric
//! problems (shape mismatches, divergence, non-finite values, exit 4).

use thiserror::Error;

/// Convenience alias used across the crate.
pub type Result<T> = std::result::Result<T, Error>;

/// Any failure the library can surface to a caller.
#[derive(Debug, Error)]
pub enum Error {
    /// The caller asked for something contradictory or incomplete:
    /// unknown enum value in a config, missing mandatory field, bad flag
    /// combination.
    #[error("usage error: {0}")]
    Usage(String),

    /// An input file or serialized artifact could not be read or did not
    /// have the promised shape.
    #[error("data error: {0}")]
    Data(String),

    /// The math went wrong: dimension mismatch, non-finite loss, numeric
    /// guard tripped.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// An I/O failure, annotated with the path or operation that failed.
    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn usage(msg: impl Into<String>) -> Self {
        Error::Usage(msg.into())
    }

    pub fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }

    pub fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }

    pub fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }

    /// Process exit code for the CLI: 2 usage, 3 data, 4 numeric.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Usage(_) => 2,
            Error::Data(_) | Error::Io { .. } => 3,
            Error::Numeric(_) => 4,
        }
    }
}
