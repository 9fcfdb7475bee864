use std::path::PathBuf;

use thiserror::Error;

use crate::eventgraph::Violation;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("missing input file {path}: {source}")]
    MissingInput {
        path: PathBuf,
        source: std::io::Error,
    },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },

    #[error("{path}:{line}: parse error: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("document {doc_id}: {}", join_violations(.violations))]
    Validation {
        doc_id: String,
        violations: Vec<Violation>,
    },

    #[error("{}{message}", doc_prefix(.doc_id))]
    Data { doc_id: String, message: String },

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("extractor is frozen; its weights cannot be updated")]
    Frozen,

    #[error("document {doc_id}: predictor failed: {message}")]
    Predictor { doc_id: String, message: String },
}

fn doc_prefix(doc_id: &str) -> String {
    if doc_id.is_empty() {
        String::new()
    } else {
        format!("document {doc_id}: ")
    }
}

fn join_violations(v: &[Violation]) -> String {
    v.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("; ")
}

impl Error {
    pub(crate) fn arg(msg: impl Into<String>) -> Self {
        Error::Argument(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        let path = path.into();
        if source.kind() == std::io::ErrorKind::NotFound {
            Error::MissingInput { path, source }
        } else {
            Error::Io { path, source }
        }
    }

    /// Process exit status used by the command-line tool.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::MissingInput { .. } => 2,
            Error::Parse { .. }
            | Error::Validation { .. }
            | Error::Data { .. }
            | Error::Predictor { .. } => 3,
            Error::Config(_) | Error::Argument(_) | Error::Frozen => 4,
            Error::Io { .. } => 1,
        }
    }
}
