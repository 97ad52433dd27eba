use std::fmt;

/// Errors raised anywhere in the library.
///
/// The three families map onto the CLI exit codes: configuration problems
/// (1), numeric failures (2) and I/O (3).
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("numeric error in {op}: {detail}")]
    Numeric { op: String, detail: String },

    #[error("degenerate input in {op}: {detail}")]
    Degenerate { op: String, detail: String },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn config(msg: impl fmt::Display) -> Self {
        Error::Config(msg.to_string())
    }

    pub fn numeric(op: impl fmt::Display, detail: impl fmt::Display) -> Self {
        Error::Numeric {
            op: op.to_string(),
            detail: detail.to_string(),
        }
    }

    pub fn degenerate(op: impl fmt::Display, detail: impl fmt::Display) -> Self {
        Error::Degenerate {
            op: op.to_string(),
            detail: detail.to_string(),
        }
    }

    /// Process exit code used by the command line runner.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 1,
            Error::Numeric { .. } | Error::Degenerate { .. } => 2,
            Error::Io(_) => 3,
        }
    }
}
