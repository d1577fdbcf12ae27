use comanip::checkpoint::CheckpointError;
use comanip::dyad::DyadError;
use comanip::intent::IntentError;
use comanip::metrics::MetricsError;
use comanip::ppo::PpoError;

use crate::artifacts::ArtifactError;
use crate::config::ConfigError;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Artifact(#[from] ArtifactError),
    #[error(transparent)]
    Dyad(#[from] DyadError),
    #[error(transparent)]
    Intent(#[from] IntentError),
    #[error(transparent)]
    Ppo(#[from] PpoError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    /// 1 for usage and configuration problems, 2 for failures while running.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Config(_) => 1,
            _ => 2,
        }
    }
}
