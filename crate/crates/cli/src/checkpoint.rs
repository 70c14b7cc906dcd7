use std::path::Path;

use jointsurv::data::Regime;
use jointsurv::trainer::{JointModel, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};
use crate::manifest::{read_json, write_atomic};

pub const CHECKPOINT_FORMAT: &str = "jointsurv-checkpoint/1";

/// How the training cohort was split, so evaluation can recover the test set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitRecord {
    pub seed: u64,
    pub test_fraction: f64,
    pub val_fraction: f64,
    /// Training was restricted to one regime.
    pub regime: Option<Regime>,
}

/// Trained model with its normalisation statistics, baseline hazard and the
/// configuration that produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub model: JointModel,
    pub train_config: TrainConfig,
    pub split: SplitRecord,
    /// SHA-256 of the cohort file the model was trained on.
    pub cohort_digest: String,
}

impl Checkpoint {
    pub fn new(model: JointModel, train_config: TrainConfig, split: SplitRecord, cohort_digest: String) -> Self {
        Self {
            format: CHECKPOINT_FORMAT.into(),
            model,
            train_config,
            split,
            cohort_digest,
        }
    }

    pub fn save(&self, path: &Path) -> CliResult<()> {
        let text = serde_json::to_string(self).map_err(|e| CliError::json(path, e))?;
        write_atomic(path, format!("{text}\n").as_bytes())
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let c: Checkpoint = read_json(path)?;
        if c.format != CHECKPOINT_FORMAT {
            return Err(CliError::Core(jointsurv::Error::Data(format!(
                "{}: checkpoint format {:?}, expected {CHECKPOINT_FORMAT:?}",
                path.display(),
                c.format
            ))));
        }
        if c.model.breslow.is_none() {
            return Err(CliError::Core(jointsurv::Error::Data(format!(
                "{}: checkpoint has no baseline hazard",
                path.display()
            ))));
        }
        Ok(c)
    }
}
