use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = FlowKanError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum FlowKanError {
    /// A caller broke an operation's precondition (shape, width, scalar loss...).
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("validation error: {0}")]
    Validation(String),

    #[error("parse error at {context}: {message}")]
    Parse { context: String, message: String },

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("scenario generation failed: {0}")]
    Generation(String),

    #[error("queueing oracle unstable on link {link}: arrival rate {lambda} >= service rate {mu}")]
    Unstable { link: usize, lambda: f64, mu: f64 },

    #[error("training aborted: {0}")]
    Training(String),

    #[error("search failed: {0}")]
    Search(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl FlowKanError {
    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Self::Contract(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Self::Config(msg.into())
    }

    pub(crate) fn validation(msg: impl Into<String>) -> Self {
        Self::Validation(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(context: impl Into<String>, message: impl Into<String>) -> Self {
        Self::Parse {
            context: context.into(),
            message: message.into(),
        }
    }
}
