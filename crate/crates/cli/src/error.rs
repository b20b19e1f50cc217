use std::path::PathBuf;

use resmonet_core::analyzer::AnalyzerError;
use resmonet_core::expert::ExpertError;
use resmonet_core::graph::{ExecError, GraphError, WeightError};
use resmonet_core::profiler::ProfileError;
use resmonet_core::trainer::TrainError;
use resmonet_core::vision::VisionError;
use resmonet_session::{AuthError, ConfigError, ServerError};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Graph { path: PathBuf, source: GraphError },
    #[error(transparent)]
    Weights(#[from] WeightError),
    #[error(transparent)]
    Vision(#[from] VisionError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Exec(#[from] ExecError),
    #[error(transparent)]
    Analyzer(#[from] AnalyzerError),
    #[error(transparent)]
    Profile(#[from] ProfileError),
    #[error(transparent)]
    Expert(#[from] ExpertError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Auth(#[from] AuthError),
    #[error(transparent)]
    Server(#[from] ServerError),
}

impl CliError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.into(),
            source,
        }
    }

    /// Name of the underlying error type, shown in front of the message.
    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Usage(_) => "UsageError",
            CliError::Io { .. } => "IoError",
            CliError::Graph { .. } => "GraphError",
            CliError::Weights(_) => "WeightError",
            CliError::Vision(_) => "VisionError",
            CliError::Train(_) => "TrainError",
            CliError::Exec(_) => "ExecError",
            CliError::Analyzer(_) => "AnalyzerError",
            CliError::Profile(_) => "ProfileError",
            CliError::Expert(_) => "ExpertError",
            CliError::Config(_) => "ConfigError",
            CliError::Auth(_) => "AuthError",
            CliError::Server(_) => "ServerError",
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            _ => 2,
        }
    }
}
