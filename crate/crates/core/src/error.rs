use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("non-finite value produced by {0}")]
    NonFinite(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("format error in {path}: {detail}")]
    Format { path: PathBuf, detail: String },

    #[error("bad checkpoint magic: expected \"TCKT\", found {found:02x?}")]
    BadMagic { found: [u8; 4] },

    #[error("unsupported checkpoint version {found} (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("checkpoint truncated while reading {context}")]
    Truncated { context: String },

    #[error("mask does not match registry: {0}")]
    MaskMismatch(String),

    #[error("pruning {pruned} of {remaining} remaining weights would empty the network")]
    WouldEmptyNetwork { pruned: usize, remaining: usize },

    #[error("training diverged at prune iteration {iteration}, step {step}")]
    Divergence { iteration: usize, step: usize },

    #[error("invalid config key `{key}`: {detail}")]
    Config { key: String, detail: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
