use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("invalid group layout: {0}")]
    Layout(String),

    #[error("invalid hyperparameter `{name}` = {value}: {reason}")]
    Hyperparameter {
        name: &'static str,
        value: f64,
        reason: &'static str,
    },

    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),

    #[error("IDX parse error in {path} at byte offset {offset}: {message}")]
    Idx {
        path: String,
        offset: usize,
        message: String,
    },

    #[error("label {label} out of range for {classes} classes")]
    Label { label: usize, classes: usize },

    #[error("empty {0}")]
    Empty(&'static str),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn dim(context: &'static str, expected: usize, actual: usize) -> Self {
        Error::DimensionMismatch {
            context,
            expected,
            actual,
        }
    }

    pub(crate) fn hyper(name: &'static str, value: f64, reason: &'static str) -> Self {
        Error::Hyperparameter {
            name,
            value,
            reason,
        }
    }
}
