//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch, expected {expected}, got {got}")]
    ShapeMismatch {
        op: &'static str,
        expected: String,
        got: String,
    },

    #[error("{op}: matrix must be square, got {rows}x{cols}")]
    NotSquare {
        op: &'static str,
        rows: usize,
        cols: usize,
    },

    #[error("{context}: non-finite value encountered")]
    NonFinite { context: String },

    #[error("SVD did not converge within {sweeps} Jacobi sweeps")]
    SvdNoConvergence { sweeps: usize },

    #[error("sinkhorn_normalize: entry ({row},{col}) = {value} is not strictly positive")]
    NonPositiveEntry { row: usize, col: usize, value: f64 },

    #[error("{op}: input is not orthogonal (max deviation {deviation:.3e})")]
    NotOrthogonal { op: &'static str, deviation: f64 },

    #[error("invalid permutation: {detail}")]
    InvalidPermutation { detail: String },

    #[error("invalid semi-permutation: {detail}")]
    InvalidSemiPermutation { detail: String },

    #[error("norm scale entry {index} = {value} is degenerate (|value| < 1e-12); cannot absorb")]
    DegenerateScale { index: usize, value: f64 },

    #[error("{op}: model has {kind} norms with non-absorbed scales; run absorb_layernorm first")]
    NormNotAbsorbed { op: &'static str, kind: String },

    #[error("{op}: unsupported for activation {activation}: {detail}")]
    ActivationUnsupported {
        op: &'static str,
        activation: String,
        detail: String,
    },

    #[error("configuration mismatch: {detail}")]
    ConfigMismatch { detail: String },

    #[error("{context}: input is empty")]
    EmptyInput { context: String },

    #[error("training diverged at step {step}: loss {loss}")]
    TrainingDiverged { step: usize, loss: f64 },

    #[error("numeric failure: {context}")]
    Numeric { context: String },

    #[error("checkpoint magic mismatch: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 8], found: [u8; 8] },

    #[error("checkpoint truncated: {context}")]
    Truncated { context: String },

    #[error("checkpoint format error: {detail}")]
    FormatInvalid { detail: String },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Stable machine-readable kind tag, used by the CLI's error JSON.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::ShapeMismatch { .. } => "shape_mismatch",
            Error::NotSquare { .. } => "not_square",
            Error::NonFinite { .. } => "non_finite",
            Error::SvdNoConvergence { .. } => "svd_no_convergence",
            Error::NonPositiveEntry { .. } => "non_positive_entry",
            Error::NotOrthogonal { .. } => "not_orthogonal",
            Error::InvalidPermutation { .. } => "invalid_permutation",
            Error::InvalidSemiPermutation { .. } => "invalid_semi_permutation",
            Error::DegenerateScale { .. } => "degenerate_scale",
            Error::NormNotAbsorbed { .. } => "norm_not_absorbed",
            Error::ActivationUnsupported { .. } => "activation_unsupported",
            Error::ConfigMismatch { .. } => "config_mismatch",
            Error::EmptyInput { .. } => "empty_input",
            Error::TrainingDiverged { .. } => "training_diverged",
            Error::Numeric { .. } => "numeric",
            Error::BadMagic { .. } => "bad_magic",
            Error::Truncated { .. } => "truncated",
            Error::FormatInvalid { .. } => "format_invalid",
            Error::Io(_) => "io",
        }
    }
}
