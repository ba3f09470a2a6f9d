//! Error type for configuration, checkpoint and experiment I/O paths.
//!
//! Numeric shape mismatches inside the compute graph are programmer errors and
//! panic with messages naming both shapes instead of threading `Result`
//! through every arithmetic call.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("training diverged: {0}")]
    Diverged(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}
