//! Error type shared across the library.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Matrix or parameter dimensions do not line up.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// A computation produced NaN or infinity.
    #[error("non-finite value in layer {layer}: {context}")]
    NonFinite { layer: usize, context: String },

    /// A batch or dataset with no samples where at least one is required.
    #[error("empty batch")]
    EmptyBatch,

    /// Invalid configuration value; the message names the offending field.
    #[error("invalid configuration: {0}")]
    Config(String),

    /// Privacy noise calibration failed (e.g. delta too large for the
    /// Gaussian mechanism formula).
    #[error("privacy calibration: {0}")]
    Calibration(String),

    /// An argument outside the mathematical domain of an operation.
    #[error("domain error: {0}")]
    Domain(String),

    /// Operation applied to the wrong task kind (classification vs regression).
    #[error("task mismatch: {0}")]
    TaskMismatch(String),

    /// A data file could not be parsed; `detail` carries the byte offset or
    /// line number where parsing stopped.
    #[error("{path}: {detail}")]
    Format { path: String, detail: String },

    /// Wraps an error with the communication round it occurred in.
    #[error("round {round}: {source}")]
    Round {
        round: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Attach round context to an error surfaced from inside the training loop.
    pub fn in_round(self, round: usize) -> Error {
        Error::Round {
            round,
            source: Box::new(self),
        }
    }
}
