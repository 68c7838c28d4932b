use std::path::Path;

use cct::train::TrainError;

/// Exit status 1: usage, I/O or configuration problems.
pub const EXIT_FAILURE: u8 = 1;
/// Exit status 2: training aborted on a non-finite value.
pub const EXIT_NUMERIC: u8 = 2;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error(transparent)]
    Core(#[from] cct::Error),
}

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io { path: path.display().to_string(), source }
    }

    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Core(cct::Error::Train(TrainError::NonFinite { .. })) => EXIT_NUMERIC,
            _ => EXIT_FAILURE,
        }
    }
}

macro_rules! via_core {
    ($($ty:ty),*) => {
        $(impl From<$ty> for CliError {
            fn from(e: $ty) -> Self {
                CliError::Core(e.into())
            }
        })*
    };
}

via_core!(
    cct::TensorError,
    cct::ConfigError,
    cct::DataError,
    cct::CheckpointError,
    cct::TrainError,
    cct::MetricsError
);
