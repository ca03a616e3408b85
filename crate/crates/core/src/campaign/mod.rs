//! Config-driven experiments: training a baseline, running an iterative
//! prune-and-finetune campaign with persisted state, evaluating checkpoints
//! and summarising a finished run.

pub mod config;
pub mod report;
pub mod runner;
pub mod state;

use std::path::PathBuf;
use thiserror::Error;

pub use config::{ExperimentConfig, StopRule};
pub use report::{cmd_report, write_report};
pub use runner::{cmd_eval, cmd_prune, cmd_train, PruneOptions, TrainMetrics};
pub use state::{CampaignStatus, IterationRecord, PruneCampaignState};

#[derive(Debug, Error)]
pub enum CampaignError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("bad input: {0}")]
    Input(String),
    #[error("{0}")]
    Usage(String),
    #[error("run directory is locked by {0}")]
    Locked(PathBuf),
    #[error("report: {0}")]
    Report(String),
    #[error(transparent)]
    Net(#[from] crate::net::NetError),
    #[error(transparent)]
    Surgery(#[from] crate::surgery::SurgeryError),
    #[error(transparent)]
    Consensus(#[from] crate::consensus::ConsensusError),
    #[error(transparent)]
    Accounting(#[from] crate::accounting::AccountingError),
    #[error(transparent)]
    Robustness(#[from] crate::robustness::RobustnessError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl CampaignError {
    /// 2 for problems with what the user supplied, 3 for failures while running.
    pub fn exit_code(&self) -> i32 {
        match self {
            CampaignError::Config(_) | CampaignError::Input(_) | CampaignError::Usage(_) => 2,
            _ => 3,
        }
    }
}
