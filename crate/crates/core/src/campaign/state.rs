use serde::{Deserialize, Serialize};
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use super::CampaignError;
use crate::accounting::{CarbonEstimate, CostReport};
use crate::net::LayerRef;
use crate::robustness::RobustnessReport;

pub const STATE_FILE: &str = "campaign.json";
pub const LOCK_FILE: &str = "campaign.lock";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CampaignStatus {
    Running,
    /// The stop rule was met.
    Completed,
    /// No eligible block remained before the stop rule was met.
    Exhausted,
}

/// One row of the campaign: iteration 0 is the unpruned base.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub victim: Option<LayerRef>,
    /// Checkpoint directory, relative to the run directory.
    pub checkpoint: PathBuf,
    /// Consensus audit trail, relative to the run directory.
    pub audit: Option<PathBuf>,
    pub cost: CostReport,
    pub carbon: CarbonEstimate,
    pub robustness: RobustnessReport,
    /// Per-epoch fine-tuning loss of this iteration.
    #[serde(default)]
    pub finetune_loss: Vec<f64>,
}

/// Persistent campaign state. Records are only ever appended.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneCampaignState {
    pub status: CampaignStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stop_reason: Option<String>,
    /// Checkpoint the campaign started from, as given on the command line.
    pub base_checkpoint: PathBuf,
    pub records: Vec<IterationRecord>,
}

impl PruneCampaignState {
    pub fn victims(&self) -> Vec<LayerRef> {
        self.records.iter().filter_map(|r| r.victim).collect()
    }

    pub fn last(&self) -> &IterationRecord {
        self.records.last().expect("a campaign always holds its base record")
    }

    pub fn load(dir: &Path) -> Result<Self, CampaignError> {
        let path = dir.join(STATE_FILE);
        let text = fs::read_to_string(&path)
            .map_err(|e| CampaignError::Report(format!("cannot read {}: {e}", path.display())))?;
        let state: Self = serde_json::from_str(&text)
            .map_err(|e| CampaignError::Report(format!("corrupt {}: {e}", path.display())))?;
        state.check()?;
        Ok(state)
    }

    /// Structural sanity: a base record first and consecutive iterations.
    pub fn check(&self) -> Result<(), CampaignError> {
        if self.records.is_empty() {
            return Err(CampaignError::Report("campaign has no base record".into()));
        }
        for (i, r) in self.records.iter().enumerate() {
            if r.iteration != i || (i == 0) != r.victim.is_none() {
                return Err(CampaignError::Report(format!("record {i} is out of sequence")));
            }
        }
        Ok(())
    }

    /// Writes the state atomically (temporary file plus rename).
    pub fn save(&self, dir: &Path) -> Result<(), CampaignError> {
        let tmp = dir.join(format!("{STATE_FILE}.tmp"));
        fs::write(&tmp, serde_json::to_string_pretty(self)?)?;
        fs::rename(&tmp, dir.join(STATE_FILE))?;
        Ok(())
    }
}

/// Exclusive claim on a run directory, released on drop.
#[derive(Debug)]
pub struct RunLock {
    path: PathBuf,
}

impl RunLock {
    pub fn acquire(dir: &Path) -> Result<Self, CampaignError> {
        fs::create_dir_all(dir)?;
        let path = dir.join(LOCK_FILE);
        for _ in 0..2 {
            match OpenOptions::new().write(true).create_new(true).open(&path) {
                Ok(mut f) => {
                    writeln!(f, "{}", std::process::id())?;
                    return Ok(Self { path });
                }
                Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                    if lock_is_stale(&path) {
                        fs::remove_file(&path)?;
                        continue;
                    }
                    return Err(CampaignError::Locked(path));
                }
                Err(e) => return Err(e.into()),
            }
        }
        Err(CampaignError::Locked(path))
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

/// A lock whose owner process no longer exists. Only decidable where
/// `/proc` is available; elsewhere locks are never considered stale.
fn lock_is_stale(path: &Path) -> bool {
    let Ok(text) = fs::read_to_string(path) else {
        return false;
    };
    let Ok(pid) = text.trim().parse::<u32>() else {
        return false;
    };
    let proc_root = Path::new("/proc");
    proc_root.is_dir() && !proc_root.join(pid.to_string()).exists()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn second_lock_is_refused_until_release() {
        let dir = tempfile::tempdir().unwrap();
        let a = RunLock::acquire(dir.path()).unwrap();
        assert!(matches!(RunLock::acquire(dir.path()), Err(CampaignError::Locked(_))));
        drop(a);
        assert!(RunLock::acquire(dir.path()).is_ok());
    }

    #[test]
    fn stale_lock_is_reclaimed() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join(LOCK_FILE), "4294967294\n").unwrap();
        if Path::new("/proc").is_dir() {
            assert!(RunLock::acquire(dir.path()).is_ok());
        }
    }
}
