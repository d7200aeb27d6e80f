use std::io;

/// Errors from the mask model, its training loop and the grid search.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch: expected {expected}, got {actual}")]
    Shape { expected: usize, actual: usize },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("loss undefined: {0}")]
    Loss(String),

    #[error("training diverged at step {step}")]
    Diverged { step: usize, last_good: Box<crate::model::MaskModel> },

    #[error("bad checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Core(#[from] maskpress_core::Error),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
