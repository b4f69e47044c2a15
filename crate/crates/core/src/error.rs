use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{field} = {value} is outside its range [{lo}, {hi}]")]
    Range {
        field: &'static str,
        value: f64,
        lo: f64,
        hi: f64,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("empty {0}")]
    Empty(&'static str),

    #[error("config error: {0}")]
    Config(String),

    #[error("no feasible action observed (best QoE {best_qoe:.4} < requirement {requirement:.4})")]
    Infeasible { best_qoe: f64, requirement: f64 },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("simulator failed at {context}: {source}")]
    Query {
        context: String,
        #[source]
        source: Box<Error>,
    },

    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    /// Process exit code used by the CLI.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::InvalidArgument(_) | Error::Range { .. } => 2,
            Error::Infeasible { .. } => 3,
            Error::Numerical(_) => 4,
            Error::Query { source, .. } => source.exit_code(),
            Error::Empty(_) | Error::Format { .. } | Error::Io { .. } => 1,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            message: message.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
