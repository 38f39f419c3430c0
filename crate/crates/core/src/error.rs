use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("parse error at line {line}: {message}")]
    Parse { line: u64, message: String },

    #[error("registry error: {0}")]
    Registry(String),

    #[error("score {raw} outside declared range [{min}, {max}]{}", context_suffix(.context))]
    Range {
        raw: i64,
        min: i64,
        max: i64,
        context: Option<String>,
    },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("non-finite {component} loss at step {step}")]
    NonFinite { component: &'static str, step: u64 },

    #[error("evaluation unavailable: {0}")]
    EvaluationUnavailable(String),

    #[error("incompatible checkpoint: {0}")]
    Version(String),

    #[error("{path}: {source}")]
    File {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

fn context_suffix(context: &Option<String>) -> String {
    match context {
        Some(c) => format!(" ({c})"),
        None => String::new(),
    }
}

impl Error {
    pub(crate) fn file(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::File {
            path: path.into(),
            source,
        }
    }
}
