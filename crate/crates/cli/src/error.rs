use std::path::{Path, PathBuf};

use thiserror::Error;

use tapfuse::events::EventError;
use tapfuse::metrics::MetricError;
use tapfuse::repr::ReprError;
use tapfuse::synth::SynthError;
use tapfuse::tensor_io::TensorIoError;
use tapfuse::tracker::TrackerError;
use tapfuse::tracks::TrackError;
use tapfuse::weights::WeightError;

use crate::config::ConfigError;

/// Failure of a subcommand, classified by process exit code.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("config: {0}")]
    Config(#[from] ConfigError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("data: {0}")]
    Data(String),
    #[error("contract violation: {0}")]
    Contract(String),
}

impl CliError {
    pub const CONFIG: i32 = 2;
    pub const DATA: i32 = 3;
    pub const CONTRACT: i32 = 4;

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => Self::CONFIG,
            CliError::Io { .. } | CliError::Data(_) => Self::DATA,
            CliError::Contract(_) => Self::CONTRACT,
        }
    }

    pub(crate) fn io(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
        move |source| CliError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

impl From<EventError> for CliError {
    fn from(e: EventError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<TensorIoError> for CliError {
    fn from(e: TensorIoError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<TrackError> for CliError {
    fn from(e: TrackError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<ReprError> for CliError {
    fn from(e: ReprError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<SynthError> for CliError {
    fn from(e: SynthError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<WeightError> for CliError {
    fn from(e: WeightError) -> Self {
        match e {
            WeightError::BadMagic | WeightError::Truncated(_) => CliError::Data(e.to_string()),
            WeightError::InvalidConfig(_) => CliError::Config(ConfigError::Inconsistent(e.to_string())),
            _ => CliError::Contract(e.to_string()),
        }
    }
}

impl From<TrackerError> for CliError {
    fn from(e: TrackerError) -> Self {
        match e {
            TrackerError::Events(inner) => inner.into(),
            TrackerError::Fusion(_) => CliError::Data(e.to_string()),
            _ => CliError::Contract(e.to_string()),
        }
    }
}

impl From<MetricError> for CliError {
    fn from(e: MetricError) -> Self {
        match e {
            MetricError::BadThresholds => CliError::Config(ConfigError::Inconsistent(e.to_string())),
            MetricError::GridMismatch | MetricError::LengthMismatch(..) => CliError::Contract(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}
