//! Crate-wide error type and result alias.

use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by dataset handling, training, aggregation and analysis.
#[derive(Debug, Error)]
pub enum Error {
    /// A configuration value failed validation. `field` is the dotted path of
    /// the offending entry (e.g. `federation.num_malicious`).
    #[error("invalid config value at `{field}`: {message}")]
    Config { field: String, message: String },

    /// Incompatible tensor/layer dimensions.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// An operation was called with arguments that make it undefined
    /// (empty update set, zero-sized batch, malformed attack spec, ...).
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A binary dataset file did not match the expected layout. `offset` is
    /// the byte position at which the mismatch was detected.
    #[error("malformed IDX file {path}: {message} (at byte {offset})")]
    IdxFormat {
        path: PathBuf,
        offset: u64,
        message: String,
    },

    /// A checkpoint file could not be decoded.
    #[error("malformed checkpoint {path}: {message}")]
    Checkpoint { path: PathBuf, message: String },

    /// A config or report file could not be parsed.
    #[error("failed to parse {path}: {message}")]
    Parse { path: PathBuf, message: String },

    /// Training produced a non-finite loss.
    #[error("training diverged at epoch {epoch} (loss = {loss})")]
    Diverged { epoch: usize, loss: f64 },

    /// Statistical analysis could not be carried out on the given inputs.
    #[error("analysis error: {0}")]
    Analysis(String),

    /// A failure inside one client's local step, annotated with the id so a
    /// swarm-wide run can name the culprit.
    #[error("client {client_id}: {source}")]
    Client {
        client_id: u32,
        #[source]
        source: Box<Error>,
    },

    /// Filesystem failure, annotated with the path involved.
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    /// Shorthand for a [`Error::Config`] value.
    pub fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            message: message.into(),
        }
    }

    /// Shorthand for wrapping an I/O error with its path.
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

/// Convenience alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;
