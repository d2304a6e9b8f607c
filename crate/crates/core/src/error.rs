use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("session {session}: {message}")]
    Validation { session: String, message: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("index {index} out of range for size {bound}")]
    Index { index: usize, bound: usize },

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("{0}")]
    EmptyInput(String),

    #[error("not a checkpoint: {0}")]
    NotCheckpoint(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("training diverged: non-finite {component} loss at epoch {epoch}, step {step}")]
    Diverged { component: &'static str, epoch: usize, step: usize },

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}
