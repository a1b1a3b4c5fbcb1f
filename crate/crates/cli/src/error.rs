use thiserror::Error;

use selfaug_core::augment::AugmentError;
use selfaug_core::datasets::DatasetError;
use selfaug_core::eval::EvalError;
use selfaug_core::model::ModelError;
use selfaug_core::training::TrainError;

/// Failure of a subcommand. Each kind maps to a fixed process exit code.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("training failed: {0}")]
    Training(String),
    #[error("refusing to continue: {0}")]
    Refused(String),
    #[error("incompatible checkpoint: {0}")]
    Incompatible(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) | CliError::Training(_) => 3,
            CliError::Refused(_) => 4,
            CliError::Incompatible(_) => 5,
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;

pub fn io(path: &std::path::Path, e: std::io::Error) -> CliError {
    CliError::Data(format!("{}: {e}", path.display()))
}

impl From<DatasetError> for CliError {
    fn from(e: DatasetError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<AugmentError> for CliError {
    fn from(e: AugmentError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Shape(_) | ModelError::Version { .. } => {
                CliError::Incompatible(e.to_string())
            }
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Config(m) => CliError::Config(m),
            other => CliError::Training(other.to_string()),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::Shape(m) => CliError::Incompatible(m),
            EvalError::Model(m) => m.into(),
            EvalError::Train(t) => t.into(),
            other => CliError::Data(other.to_string()),
        }
    }
}
