//! Crate-wide error type.

use thiserror::Error;

/// Errors produced by any uip module.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: expected {expected:?}, got {got:?}")]
    ShapeMismatch { expected: Vec<usize>, got: Vec<usize> },

    #[error("tensor data length {len} does not match shape {shape:?}")]
    BadTensor { shape: Vec<usize>, len: usize },

    #[error("non-finite value encountered in {context}")]
    NonFinite { context: String },

    #[error("invalid architecture: {0}")]
    InvalidArch(String),

    #[error("architecture descriptor parse error: {0}")]
    ArchText(String),

    #[error("models have different architectures")]
    ArchMismatch,

    #[error("parameter vector length {got} does not match architecture ({expected})")]
    BadParamCount { expected: usize, got: usize },

    #[error("invalid label {label} for {classes} classes")]
    InvalidLabel { label: usize, classes: usize },

    #[error("soft label invalid: {0}")]
    BadSoftLabel(String),

    #[error("gradient vector length {got}, expected {expected} ({wrt})")]
    BadGradLen { expected: usize, got: usize, wrt: &'static str },

    #[error("cosine similarity undefined: operand has zero norm")]
    ZeroNorm,

    #[error("model difference is zero; nothing to invert")]
    ZeroModelDifference,

    #[error("dummy sample produced a zero gradient")]
    ZeroDummyGradient,

    #[error("all inversion restarts degenerate (zero dummy gradient)")]
    DegenerateInversion,

    #[error("training diverged (non-finite loss) at epoch {epoch}, step {step}")]
    Diverged { epoch: usize, step: usize },

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("unlearn selection resolves to an empty set")]
    EmptySelection,

    #[error("unlearn selection leaves no remaining samples")]
    EmptyRemainder,

    #[error("index {index} out of range for dataset of {len} samples")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("csv error at line {line}: {msg}")]
    Csv { line: u64, msg: String },

    #[error("binary format error in {path}: {msg}")]
    BinFormat { path: String, msg: String },

    #[error("probe construction failed: no converged probe for class {class}")]
    ProbeConstruction { class: usize },

    #[error("oracle returned {got} probabilities, expected {expected}")]
    OracleLenMismatch { expected: usize, got: usize },

    #[error("config error at `{field}`: {msg}")]
    Config { field: String, msg: String },

    #[error("mixed result schema versions in report input ({0} vs {1})")]
    MixedSchemaVersions(u32, u32),

    #[error("undefended model accuracy is zero; utility ratio undefined")]
    ZeroBaselineAccuracy,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
