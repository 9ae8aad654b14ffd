use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("caption is empty or whitespace-only")]
    EmptyCaption,

    #[error("no non-empty candidate captions to rank")]
    EmptyCandidates,

    #[error("numerical degeneracy: {0}")]
    Degenerate(String),

    #[error("non-finite value at iteration {iteration}: {what}")]
    NonFinite { iteration: usize, what: String },

    #[error("lookup error: {0}")]
    Lookup(String),

    #[error("candidate generation failed after {produced} captions: {reason}")]
    CandidateGeneration {
        produced: usize,
        partial: Vec<String>,
        reason: String,
    },

    #[error("image {width}x{height} is too small for {kind} (needs at least {min}x{min})")]
    UnsupportedSize {
        kind: &'static str,
        width: usize,
        height: usize,
        min: usize,
    },

    #[error("expected {expected} items, got {got}")]
    Arity { expected: usize, got: usize },

    #[error("backend error: {0}")]
    Backend(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error in {path}: {message}")]
    Parse { path: PathBuf, message: String },

    #[error("image codec error: {0}")]
    Image(#[from] image::ImageError),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}
