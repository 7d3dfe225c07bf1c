use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("question has no tokens")]
    EmptyQuestion,

    #[error("reasoner does not support {0}")]
    Capability(&'static str),

    #[error("transport error after {attempts} attempt(s): {message}")]
    Transport { attempts: usize, message: String },

    #[error("prompt of {tokens} tokens exceeds the configured limit of {limit}")]
    PromptTooLong { tokens: usize, limit: usize },

    #[error("parse error: {0}")]
    Parse(String),

    #[error("failed to load {path}: {reason}")]
    Load { path: PathBuf, reason: String },

    #[error("training diverged at epoch {epoch}: loss = {loss}")]
    Diverged { epoch: usize, loss: f64 },

    #[error("non-finite gradient")]
    NonFiniteGradient,

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Stable short identifier used by the CLI's machine-readable error output.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Config(_) => "config",
            Error::Shape(_) => "shape",
            Error::EmptyQuestion => "empty_question",
            Error::Capability(_) => "capability",
            Error::Transport { .. } => "transport",
            Error::PromptTooLong { .. } => "prompt_too_long",
            Error::Parse(_) => "parse",
            Error::Load { .. } => "load",
            Error::Diverged { .. } => "diverged",
            Error::NonFiniteGradient => "non_finite_gradient",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
        }
    }
}
