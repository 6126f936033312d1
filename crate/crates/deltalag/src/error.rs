//! Crate-wide error type.
//!
//! Errors are split by who caused them: `Config`, `Parse`, and `Data` point at
//! user inputs (bad config files, malformed CSV rows, inconsistent bars),
//! while `Dim`, `Domain`, and `Contract` indicate a violated internal
//! call contract. The CLI maps the former to exit code 2 and the rest to 1.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid or inconsistent run configuration.
    #[error("config error: {0}")]
    Config(String),

    /// A malformed input row; carries the source path and line number.
    #[error("parse error at {path}:{line}: {msg}")]
    Parse {
        path: String,
        line: u64,
        msg: String,
    },

    /// Semantically invalid input data (e.g. low > high, duplicate ticker).
    #[error("data error: {0}")]
    Data(String),

    /// Shape mismatch in a numeric operation.
    #[error("dimension error: {0}")]
    Dim(String),

    /// A value outside the mathematical domain of an operation.
    #[error("domain error: {0}")]
    Domain(String),

    /// A violated internal call contract.
    #[error("contract violation: {0}")]
    Contract(String),

    /// A checkpoint file that does not follow the documented layout.
    #[error("checkpoint format error: {0}")]
    Format(String),

    /// A checkpoint parameter whose shape disagrees with the model config.
    #[error("shape error for parameter `{name}`: expected {expected_rows}x{expected_cols}, found {found_rows}x{found_cols}")]
    ParamShape {
        name: String,
        expected_rows: usize,
        expected_cols: usize,
        found_rows: usize,
        found_cols: usize,
    },

    /// Training could not make progress (e.g. every date skipped).
    #[error("training error: {0}")]
    Train(String),

    /// Filesystem failure, annotated with the path involved.
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the CLI: 2 for usage/config/data problems the
    /// caller can fix, 1 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Parse { .. } | Error::Data(_) | Error::Io { .. } => 2,
            _ => 1,
        }
    }
}
