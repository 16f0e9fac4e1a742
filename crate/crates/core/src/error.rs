use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("index error: {what} = {index} out of range 0..{bound}")]
    Index {
        what: &'static str,
        index: usize,
        bound: usize,
    },

    #[error("argument error: {0}")]
    Argument(String),

    /// Malformed input file. `line`/`column` come from the JSON parser.
    #[error("parse error at line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },

    /// A structurally valid model that breaks one of its invariants.
    #[error("validation error: {invariant}: {detail}")]
    Validation {
        invariant: &'static str,
        detail: String,
    },

    #[error("ergodicity error: {0}")]
    Ergodicity(String),

    #[error("singularity error: smallest singular value {min_singular_value:.3e}")]
    Singular { min_singular_value: f64 },

    #[error("non-mixing chain: total variation above 1/4 after {0} steps")]
    NonMixing(u64),

    #[error("divergence at step {step}: iterate norm {norm:.3e}")]
    Divergence { step: usize, norm: f64 },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn argument(msg: impl Into<String>) -> Self {
        Error::Argument(msg.into())
    }

    pub(crate) fn validation(invariant: &'static str, detail: impl Into<String>) -> Self {
        Error::Validation {
            invariant,
            detail: detail.into(),
        }
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Parse {
            line: e.line(),
            column: e.column(),
            message: e.to_string(),
        }
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Data(e.to_string())
    }
}
