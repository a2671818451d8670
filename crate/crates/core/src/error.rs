use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("invalid parameter: {0}")]
    Param(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("svd did not converge after {sweeps} sweeps (off-diagonal residual {residual:e})")]
    NoConvergence { sweeps: usize, residual: f64 },

    #[error("non-finite loss at step {step}")]
    NonFinite { step: usize },

    #[error("diverged at step {step}: loss {loss:e} stayed above 10x initial {initial:e}")]
    Diverged { step: usize, loss: f64, initial: f64 },

    #[error("empty dataset")]
    EmptyDataset,

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("backward called without a matching forward cache")]
    MissingCache,

    #[error(transparent)]
    Store(#[from] StoreError),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    /// True for failures caused by the optimization itself rather than by bad input.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::NoConvergence { .. } | Error::NonFinite { .. } | Error::Diverged { .. }
        )
    }
}

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("bad magic {found:?}, expected \"CRSP\"")]
    BadMagic { found: [u8; 4] },

    #[error("unsupported container version {found} (this build reads {supported})")]
    Version { found: u16, supported: u16 },

    #[error("crc mismatch: stored {stored:08x}, computed {computed:08x}")]
    Crc { stored: u32, computed: u32 },

    #[error("truncated container: {0}")]
    Truncated(String),

    #[error("malformed container: {0}")]
    Malformed(String),

    #[error("duplicate tensor name {0:?}")]
    DuplicateName(String),

    #[error("tensor {0:?} named in metadata is missing")]
    MissingTensor(String),

    #[error("group {group}: {detail}")]
    GroupShape { group: usize, detail: String },

    #[error("metadata: {0}")]
    Metadata(String),

    #[error("csv: {0}")]
    Csv(String),
}
