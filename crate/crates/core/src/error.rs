use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("duplicate {kind} id `{id}`")]
    DuplicateId { kind: &'static str, id: String },

    #[error("gold id `{0}` is not in the knowledge base")]
    UnknownGoldId(String),

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("token id {id} out of range for vocabulary of size {vocab_size}")]
    TokenOutOfRange { id: u32, vocab_size: usize },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("non-finite loss at step {step}: cl={cl} automlm={automlm} mlm={mlm} joint={joint}")]
    NonFiniteLoss {
        step: usize,
        cl: f64,
        automlm: f64,
        mlm: f64,
        joint: f64,
    },

    #[error("not enough distinct sessions: need {needed}, have {available}")]
    NotEnoughSessions { needed: usize, available: usize },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Stable machine-readable name of the variant.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Io { .. } => "io",
            Error::Parse { .. } => "parse",
            Error::DuplicateId { .. } => "duplicate_id",
            Error::UnknownGoldId(_) => "unknown_gold_id",
            Error::Invalid(_) => "invalid",
            Error::Config(_) => "config",
            Error::TokenOutOfRange { .. } => "token_out_of_range",
            Error::Shape(_) => "shape",
            Error::Checkpoint(_) => "checkpoint",
            Error::NonFiniteLoss { .. } => "non_finite_loss",
            Error::NotEnoughSessions { .. } => "not_enough_sessions",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
