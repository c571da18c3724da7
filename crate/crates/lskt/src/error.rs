//! Error types shared across the crate.

use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    /// Two tensors (or a tensor and an expected contract) disagree on shape.
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// Softmax asked to normalize a window with no unmasked position.
    #[error("empty attention window: all positions masked")]
    EmptyAttentionWindow,

    /// An operation precondition was violated by the caller.
    #[error("contract violation: {0}")]
    Contract(String),

    /// A lookup index fell outside the known vocabulary.
    #[error("vocabulary error: {0}")]
    Vocabulary(String),

    /// Invalid configuration (bad key, bad value, incompatible checkpoint).
    #[error("config error: {0}")]
    Config(String),

    /// Malformed input data, with the 1-based line it came from.
    #[error("data format error at line {line}: {msg}")]
    DataFormat { line: usize, msg: String },

    /// Dataset-level failure not tied to a specific line.
    #[error("data error: {0}")]
    Data(String),

    /// AUC is undefined when only one class is present.
    #[error("undefined AUC: scores contain only one class")]
    UndefinedAuc,

    /// Training produced a non-finite loss and was aborted.
    #[error("numerical abort at epoch {epoch}, batch {batch}: {detail}")]
    NumericalAbort {
        epoch: usize,
        batch: usize,
        detail: String,
    },

    /// A finite-difference audit found an analytic gradient out of
    /// tolerance.
    #[error("gradient mismatch in {group}: max relative error {rel_err:.3e}")]
    GradientMismatch { group: String, rel_err: f64 },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Process exit code for the batch CLI: 2 config, 3 data, 4 numerical.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::ShapeMismatch { .. } | Error::Contract(_) => 2,
            Error::DataFormat { .. }
            | Error::Data(_)
            | Error::Vocabulary(_)
            | Error::Io(_)
            | Error::Json(_)
            | Error::UndefinedAuc => 3,
            Error::NumericalAbort { .. } => 4,
            Error::EmptyAttentionWindow => 4,
            Error::GradientMismatch { .. } => 4,
        }
    }
}
