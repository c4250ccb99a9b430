//! Crate-wide error type.

use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by any stage of the upsampling pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}:{line}: parse error: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("failed to read {path}: {source}")]
    IoRead {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("failed to write {path}: {source}")]
    IoWrite {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("k = {k} exceeds available candidate count {available}")]
    KTooLarge { k: usize, available: usize },

    #[error(
        "midpoint pool exhausted: need {needed} points but only {available} \
         distinct midpoints exist; raise k_neighbors"
    )]
    PoolExhausted { needed: usize, available: usize },

    #[error("mesh validation failed: {0}")]
    InvalidMesh(String),

    #[error("checkpoint {path}: {msg}")]
    Checkpoint { path: PathBuf, msg: String },

    #[error("checkpoint {path}: checksum mismatch (file corrupt or truncated)")]
    ChecksumMismatch { path: PathBuf },

    #[error("tensor {name}: expected shape {expected:?}, found {found:?}")]
    ShapeMismatch {
        name: String,
        expected: (usize, usize),
        found: (usize, usize),
    },

    #[error("non-finite update at iteration {iteration}, point {point}")]
    NonFiniteUpdate { iteration: usize, point: usize },

    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },

    #[error("unknown study `{0}`; valid: prediction-content, network-input, refine-strategy, regressor-input, train-noise")]
    UnknownStudy(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Process exit code for the CLI: 3 for data errors, 4 for numeric failures.
    pub fn exit_code(&self) -> u8 {
        match self {
            Error::NonFiniteUpdate { .. } | Error::NonFiniteLoss { .. } => 4,
            _ => 3,
        }
    }
}
