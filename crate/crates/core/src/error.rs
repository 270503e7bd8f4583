use std::path::PathBuf;

use thiserror::Error;

use crate::sits::Modality;

pub type Result<T> = std::result::Result<T, S4Error>;

#[derive(Debug, Error)]
pub enum S4Error {
    #[error("empty series: {0}")]
    EmptySeries(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("channel mismatch: expected {expected}, got {got}")]
    ChannelMismatch { expected: usize, got: usize },
    #[error("input dims {dims:?} are not multiples of {multiple}")]
    ShapeNotPadded { dims: [usize; 3], multiple: usize },
    #[error("invalid series: {0}")]
    InvalidSeries(String),
    #[error("empty dataset")]
    EmptyDataset,
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("negative set is empty")]
    EmptyNegativeSet,
    #[error("feature map has fewer than two space-time positions")]
    DegenerateMap,
    #[error("label {value} out of range for {classes} classes")]
    LabelOutOfRange { value: i32, classes: usize },
    #[error("non-finite loss at epoch {epoch}, step {step}")]
    NonFiniteLoss { epoch: usize, step: usize },
    #[error("incompatible checkpoint: {0}")]
    IncompatibleCheckpoint(String),
    #[error("modality mismatch: model expects {expected:?}, got {got:?}")]
    ModalityMismatch { expected: Modality, got: Modality },
    #[error("sample {0} has no cloud mask")]
    MissingCloudMask(String),
    #[error("corrupt archive: {0}")]
    CorruptArchive(String),
    #[error("unsupported schema version {0}")]
    UnsupportedSchema(u32),
    #[error("missing file: {}", .0.display())]
    MissingFile(PathBuf),
    #[error("manifest validation failed: {0}")]
    InvalidManifest(String),
    #[error("i/o failure: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl S4Error {
    /// Process exit code: 2 config, 3 I/O, 4 non-finite loss,
    /// 5 incompatible checkpoint, 6 missing cloud masks, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            S4Error::InvalidConfig(_) => 2,
            S4Error::Io(_)
            | S4Error::Json(_)
            | S4Error::MissingFile(_)
            | S4Error::CorruptArchive(_)
            | S4Error::UnsupportedSchema(_)
            | S4Error::InvalidManifest(_) => 3,
            S4Error::NonFiniteLoss { .. } => 4,
            S4Error::IncompatibleCheckpoint(_) | S4Error::ModalityMismatch { .. } => 5,
            S4Error::MissingCloudMask(_) => 6,
            _ => 1,
        }
    }
}
