use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid rainfall value {value} at pixel ({row}, {col})")]
    InvalidRain { row: usize, col: usize, value: f64 },

    #[error("invalid threshold {0}: must be finite and positive")]
    InvalidThreshold(f64),

    #[error("invalid threshold schema: {0}")]
    InvalidSchema(String),

    #[error("shape mismatch: expected {expected}, got {actual}")]
    ShapeMismatch { expected: String, actual: String },

    #[error("channel {name} (index {index}) has zero variance over the training split")]
    ZeroVariance { index: usize, name: String },

    #[error("channel count mismatch: expected {expected}, got {actual}")]
    ChannelMismatch { expected: usize, actual: usize },

    #[error("class {class} has no training pixels; construct class stats with a floor count")]
    AbsentClass { class: usize },

    #[error("probabilities are not normalized at pixel {pixel}: sum {sum}")]
    Unnormalized { pixel: usize, sum: f64 },

    #[error("label {label} out of range for {num_classes} classes")]
    LabelOutOfRange { label: usize, num_classes: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("empty {0}")]
    Empty(String),

    #[error("empty split partition: {0}")]
    EmptySplit(String),

    #[error("unparseable timestamp {0:?}")]
    Timestamp(String),

    #[error("bad magic bytes in {path}")]
    BadMagic { path: PathBuf },

    #[error("truncated container {path}: {detail}")]
    Truncated { path: PathBuf, detail: String },

    #[error("payload size mismatch in {path}: header declares {expected} bytes, found {actual}")]
    PayloadSizeMismatch {
        path: PathBuf,
        expected: usize,
        actual: usize,
    },

    #[error("malformed container header in {path}: {detail}")]
    Header { path: PathBuf, detail: String },

    #[error("unsupported container version {0}")]
    UnsupportedVersion(u32),

    #[error("degenerate split: {0}")]
    DegenerateSplit(String),

    #[error("non-finite loss: {0}")]
    NonFinite(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
