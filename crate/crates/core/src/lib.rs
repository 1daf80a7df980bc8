//! Search, train and deploy binary (1-bit) convolutional networks at desk scale.
//!
//! The crate is organized around a small reverse-mode tensor core:
//!
//! * [`ndtensor`] — dense f32 tensors on a gradient tape, optimizers,
//!   learning-rate schedules and the `BNASCKPT` checkpoint format.
//! * [`binarize`] — sign quantization with a straight-through estimator and
//!   the XNOR-style binary convolution approximation `βK ⊙ (B ∗ I)`.
//! * [`searchspace`] — the seven candidate layer types and their cost model.
//! * [`celltemplate`] — DARTS-style cells (continuous and discrete) with
//!   inter-cell skip connections.
//! * [`search`] — diversity-regularized differentiable architecture search.
//! * [`trainer`] — network assembly from a genotype and the training schemes.
//! * [`deploy`] — bit-packed XNOR+popcount inference and cost reports.
//! * [`data`] — CIFAR-10 binary ingestion, synthetic fixtures, augmentation.

pub mod binarize;
pub mod celltemplate;
pub mod data;
pub mod deploy;
pub mod ndtensor;
pub mod search;
pub mod searchspace;
pub mod trainer;

use thiserror::Error as ThisError;

/// Crate-wide error type. Numerical contracts (shape agreement, finite
/// outputs) surface here rather than panicking so callers can map them to
/// process exit codes.
#[derive(Debug, ThisError)]
pub enum Error {
    #[error("{op}: shape mismatch: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("{op}: non-finite value in output")]
    NonFinite { op: &'static str },
    #[error("{op}: invalid argument: {detail}")]
    InvalidArg { op: &'static str, detail: String },
    #[error("config error: {0}")]
    Config(String),
    #[error("training diverged: {0}")]
    Divergence(String),
    #[error("format error in {path}: {detail}")]
    Format { path: String, detail: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::ShapeMismatch { op, detail: detail.into() }
    }
    pub(crate) fn arg(op: &'static str, detail: impl Into<String>) -> Self {
        Error::InvalidArg { op, detail: detail.into() }
    }
}
