//! Error type shared by every module of the crate.

use thiserror::Error;

use crate::model::PromptState;

pub type Result<T, E = DoeError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum DoeError {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("input error: {0}")]
    Input(String),

    #[error("template error: {0}")]
    Template(String),

    #[error("plan error: {0}")]
    Plan(String),

    #[error("integrity error: expected checksum {expected}, found {found}")]
    Integrity { expected: String, found: String },

    #[error("unknown task `{task}`; registered tasks: [{}]", known.join(", "))]
    UnknownTask { task: String, known: Vec<String> },

    #[error("non-finite training loss at epoch {epoch}")]
    NonFiniteLoss {
        epoch: usize,
        last_finite: Box<PromptState>,
    },

    #[error("format error: {0}")]
    Format(String),

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl DoeError {
    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        DoeError::Dimension(msg.into())
    }

    pub(crate) fn format(msg: impl Into<String>) -> Self {
        DoeError::Format(msg.into())
    }

    pub(crate) fn plan(msg: impl Into<String>) -> Self {
        DoeError::Plan(msg.into())
    }
}
