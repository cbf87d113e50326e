use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch at node {node} ({op}): {detail}")]
    Shape {
        node: usize,
        op: &'static str,
        detail: String,
    },

    #[error("gradient requested for non-scalar output with shape {rows}x{cols}")]
    NonScalarOutput { rows: usize, cols: usize },

    #[error("variable {index} does not belong to this tape")]
    ForeignVar { index: usize },

    #[error("dimension mismatch: expected {expected}, found {found}")]
    Dim { expected: usize, found: usize },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("budget {budget} too small for {compressor} (needs at least {needed})")]
    BudgetTooSmall {
        compressor: &'static str,
        budget: usize,
        needed: usize,
    },

    #[error("missing training prior: {0}")]
    MissingPrior(&'static str),

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("{path}: bad magic number, expected {expected:#010x}, found {found:#010x}")]
    BadMagic {
        path: PathBuf,
        expected: u32,
        found: u32,
    },

    #[error("{path}: truncated file ({detail})")]
    Truncated { path: PathBuf, detail: String },

    #[error("image count {images} does not match label count {labels}")]
    CountMismatch { images: usize, labels: usize },

    #[error("malformed payload record: {0}")]
    Wire(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
