use std::io;

/// Errors produced by the data model, oracles, and pruning stages.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("shape mismatch: expected {expected}, got {actual}")]
    Shape { expected: usize, actual: usize },

    #[error("alignment failed: {0}")]
    Alignment(String),

    #[error("segmentation failed: {0}")]
    Segmentation(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("scoring error: {0}")]
    Scoring(String),

    #[error("remote evaluator failed after {retries} retries: {message}")]
    Remote { retries: u32, message: String },

    #[error("malformed evaluator response: {0}")]
    Protocol(String),

    #[error("cannot resume: {0}")]
    Resume(String),

    #[error("evaluation aborted: {0}")]
    Aborted(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn shape(expected: usize, actual: usize) -> Self {
        Error::Shape { expected, actual }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
