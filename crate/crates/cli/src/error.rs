use std::path::PathBuf;

use stormtail_core::Error as CoreError;

pub type CliResult<T> = Result<T, CliError>;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("unknown variant {0:?}")]
    UnknownVariant(String),

    #[error("{what} schema_version {found} is not supported (expected {expected})")]
    SchemaVersion { what: String, found: u32, expected: u32 },

    #[error("missing checkpoint {}", .0.display())]
    MissingCheckpoint(PathBuf),

    #[error("data error: {0}")]
    Data(String),

    #[error("runtime error: {0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::UnknownVariant(_) => 2,
            CliError::SchemaVersion { what, .. } if what == "config" => 2,
            CliError::SchemaVersion { .. } | CliError::MissingCheckpoint(_) | CliError::Data(_) => 3,
            CliError::Runtime(_) => 4,
        }
    }

    pub fn io(path: &std::path::Path, e: std::io::Error) -> Self {
        CliError::Data(format!("{}: {e}", path.display()))
    }
}

impl From<CoreError> for CliError {
    fn from(e: CoreError) -> Self {
        let msg = e.to_string();
        match e {
            CoreError::Config(_) | CoreError::InvalidThreshold(_) | CoreError::InvalidSchema(_) => CliError::Config(msg),
            CoreError::NonFinite(_)
            | CoreError::ShapeMismatch { .. }
            | CoreError::Unnormalized { .. }
            | CoreError::LabelOutOfRange { .. } => CliError::Runtime(msg),
            _ => CliError::Data(msg),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::Data(e.to_string())
    }
}
