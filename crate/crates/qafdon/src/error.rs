//! Error type shared across the crate.

use thiserror::Error;

/// Unified error type for every stage of the pipeline.
#[derive(Debug, Error)]
pub enum QafError {
    /// Tensor or parameter shapes do not line up.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// A configuration value violates its documented range.
    #[error("invalid configuration: {0}")]
    Config(String),

    /// An operation was called outside its contract (empty batch, non-scalar loss, ...).
    #[error("contract violation: {0}")]
    Contract(String),

    /// A query point lies outside the model's output domain.
    #[error("domain error: {0}")]
    Domain(String),

    /// A grid scenario has inconsistent stage times or parameters.
    #[error("scenario error: {0}")]
    Scenario(String),

    /// A trajectory cannot be split at the requested boundary.
    #[error("segmentation error: {0}")]
    Segmentation(String),

    /// Training produced a non-finite value or was otherwise unable to proceed.
    #[error("training error: {0}")]
    Training(String),

    /// Clients cannot be averaged (architecture mismatch, empty federation, ...).
    #[error("federation error: {0}")]
    Federation(String),

    /// Calibration cannot produce a valid conformal offset.
    #[error("calibration error: {0}")]
    Calibration(String),

    /// Metric normalization is undefined because the targets are constant.
    #[error("degenerate target range: {0}")]
    DegenerateRange(String),

    /// A dataset or trajectory file is malformed or inconsistent.
    #[error("data error: {0}")]
    Data(String),

    /// An artifact does not match the checkpoint it claims to calibrate.
    #[error("artifact mismatch: {0}")]
    ArtifactMismatch(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, QafError>;
