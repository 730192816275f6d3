//! Crate-wide error type and the process exit codes the thin CLI maps it to.

use thiserror::Error;

/// Every fallible operation in this crate returns this error.
///
/// Variants are grouped by the exit code they map to at the process
/// boundary: configuration problems (2), data/format problems (3) and
/// numeric failures (4).
#[derive(Debug, Error)]
pub enum Error {
    /// A caller violated an API precondition (bad argument, bad shape,
    /// out-of-order training stage, ...). Treated as a configuration error.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A configuration file or preset could not be resolved.
    #[error("configuration error: {0}")]
    Config(String),

    /// An input file did not match its expected on-disk format.
    /// Carries file and (1-based) line context where applicable.
    #[error("format error in {file}{}: {msg}", line.map(|l| format!(":{l}")).unwrap_or_default())]
    Format {
        file: String,
        line: Option<usize>,
        msg: String,
    },

    /// Underlying I/O failure.
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    /// A numeric invariant broke: NaN/inf in a tensor, a non-stochastic
    /// KL input, a divergent loss, ...
    #[error("numeric error: {0}")]
    Numeric(String),
}

impl Error {
    /// Shorthand for an invalid-argument error.
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    /// Shorthand for a format error with file and line context.
    pub fn format(file: impl Into<String>, line: Option<usize>, msg: impl Into<String>) -> Self {
        Error::Format {
            file: file.into(),
            line,
            msg: msg.into(),
        }
    }

    /// Process exit code for this error: 2 = configuration, 3 = data
    /// format / I/O, 4 = numeric. Success is 0.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InvalidArgument(_) | Error::Config(_) => 2,
            Error::Format { .. } | Error::Io(_) => 3,
            Error::Numeric(_) => 4,
        }
    }
}

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;
