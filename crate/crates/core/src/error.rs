use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("data length {len} does not match shape {shape:?}")]
    DataLength { shape: Vec<usize>, len: usize },

    #[error("kernel of size {kernel} is longer than the padded input of length {padded}")]
    KernelTooLong { kernel: usize, padded: usize },

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("backward needs a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("parameter #{0} requires grad but has no gradient")]
    MissingGrad(usize),

    #[error("invalid config field `{field}`: {reason}")]
    InvalidConfig { field: String, reason: String },

    #[error("{}: empty file", path.display())]
    EmptyFile { path: PathBuf },

    #[error("{}:{line}: ragged row, expected {expected} values but found {found}", path.display())]
    RaggedRow {
        path: PathBuf,
        line: usize,
        expected: usize,
        found: usize,
    },

    #[error("{}:{line}: cannot parse {token:?} as a number", path.display())]
    ParseNumber { path: PathBuf, line: usize, token: String },

    #[error("{}:{line}: missing or non-finite value", path.display())]
    NonFiniteValue { path: PathBuf, line: usize },

    #[error("{}:{line}: label {label} does not occur in the training split", path.display())]
    UnseenLabel { path: PathBuf, line: usize, label: f64 },

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("datasets are incompatible: {0}")]
    DatasetMismatch(String),

    #[error("input length {got} does not match the encoder's series length {expected}")]
    LengthMismatch { expected: usize, got: usize },

    #[error(
        "context overflow: {prompt} prompt + {latent} latent + 1 readout positions exceed the maximum context of {max}"
    )]
    ContextOverflow { prompt: usize, latent: usize, max: usize },

    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },

    #[error("metrics need a non-empty curve")]
    EmptyCurve,

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("results: {0}")]
    Results(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::InvalidConfig {
            field: field.into(),
            reason: reason.into(),
        }
    }
}
