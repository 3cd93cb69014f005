use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: non-finite value produced")]
    NonFinite { op: &'static str },

    #[error("non-finite gradient for parameter `{param}`")]
    NonFiniteGradient { param: String },

    #[error("non-finite loss at step {step} in component `{component}`")]
    NonFiniteLoss { step: usize, component: &'static str },

    #[error("non-smooth point at coordinate {index}: one-sided slopes {left:e} and {right:e} disagree")]
    NonSmoothPoint { index: usize, left: f64, right: f64 },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("utterance too short: {duration_s:.3} s does not exceed the {required_s:.3} s prompt")]
    TooShort { duration_s: f64, required_s: f64 },

    #[error("character {0:?} is not in the vocabulary")]
    OutOfVocabulary(char),

    #[error("token id {id} is outside the vocabulary of size {vocab_size}")]
    InvalidToken { id: usize, vocab_size: usize },

    #[error("sequence of {len} positions exceeds max_positions = {max}")]
    SequenceTooLong { len: usize, max: usize },

    #[error("malformed {what}: {detail}")]
    Format { what: &'static str, detail: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Wav {
        path: PathBuf,
        #[source]
        source: hound::Error,
    },
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
