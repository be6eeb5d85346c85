use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("non-finite value in embedding at index {index}")]
    NonFinite { index: usize },

    #[error("empty dataset")]
    EmptyDataset,

    #[error("need at least {needed} attributes, found {found}")]
    Arity { needed: usize, found: usize },

    #[error("malformed group {content_id:?}: {reason}")]
    MalformedGroup { content_id: String, reason: String },

    #[error("malformed batch: {0}")]
    MalformedBatch(String),

    #[error("invalid lexicon: {0}")]
    Lexicon(String),

    #[error("reply format error: {reason}")]
    ReplyFormat { reason: String, raw: String },

    #[error("transport error: {0}")]
    Transport(String),

    #[error("correction rejected: {text} text is labeled {label}")]
    CorrectionRejected { text: String, label: String },

    #[error("invalid state: {0}")]
    State(String),

    #[error("zero-norm vector cannot be compared by cosine similarity")]
    DegenerateVector,

    #[error("retrieval category {0:?} has no queries")]
    EmptyCategory(String),

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("{path}:{line}: duplicate id {id:?}")]
    DuplicateId {
        path: PathBuf,
        line: usize,
        id: String,
    },

    #[error("{path}:{line}: header mismatch: {message}")]
    HeaderMismatch {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("format error: {0}")]
    Format(String),

    #[error("truncated input at byte offset {offset}")]
    Truncated { offset: u64 },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn malformed(content_id: &str, reason: impl Into<String>) -> Self {
        Error::MalformedGroup {
            content_id: content_id.to_string(),
            reason: reason.into(),
        }
    }

    /// True for failures caused by data on disk or in a request, as opposed
    /// to the network or the host.
    pub fn is_data_error(&self) -> bool {
        !matches!(self, Error::Transport(_) | Error::Io(_))
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
