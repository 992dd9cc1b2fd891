//! Error type shared across the crate.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration (bad key, inconsistent values, wrong phase).
    #[error("configuration error: {0}")]
    Config(String),

    /// An index or id outside its documented range.
    #[error("range error: {0}")]
    Range(String),

    /// Malformed or insufficient data (unknown class ids, empty pools).
    #[error("data error: {0}")]
    Data(String),

    /// Array dimensions that do not match the operation's contract.
    #[error("shape error: {0}")]
    Shape(String),

    /// A domain-type invariant was violated (zero-norm prototype, ...).
    #[error("invariant violation: {0}")]
    Invariant(String),

    /// A loss evaluated on an empty pixel set.
    #[error("undefined loss: {0}")]
    UndefinedLoss(String),

    /// Checkpoint fed to a stage it does not belong to.
    #[error("lineage error: {0}")]
    Lineage(String),

    /// Corrupt or version-mismatched checkpoint file.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// Training produced a non-finite loss. The last finite-state epoch is
    /// reported so callers can recover its checkpoint.
    #[error("training diverged at epoch {epoch}: {message}")]
    Divergence { epoch: usize, message: String },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
}
