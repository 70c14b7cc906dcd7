use std::path::Path;

use jointsurv::data::Strategy;
use jointsurv::metrics::{CensoringSource, EvalOptions};
use jointsurv::seed;
use jointsurv::synth::GeneratorConfig;
use jointsurv::trainer::{SearchSpace, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};
use crate::experiment::PerturbKind;

/// One declarative document per experiment. Every section is optional.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    /// Master seed; every other seed is derived from it.
    pub seed: u64,
    pub generator: GeneratorConfig,
    pub split: SplitConfig,
    pub train: TrainConfig,
    pub evaluation: EvaluationConfig,
    pub search: SearchSpace,
    pub transfer: TransferConfig,
    pub perturb: PerturbConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitConfig {
    pub test_fraction: f64,
    /// Fraction of the remaining patients held out for validation.
    pub val_fraction: f64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            test_fraction: 0.2,
            val_fraction: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvaluationConfig {
    pub horizons: Vec<f64>,
    pub bootstrap: usize,
    pub ipcw_cindex: bool,
    pub censoring: CensoringSource,
    pub max_weight: Option<f64>,
}

impl Default for EvaluationConfig {
    fn default() -> Self {
        let d = EvalOptions::default();
        Self {
            horizons: d.horizons,
            bootstrap: d.bootstrap,
            ipcw_cindex: d.ipcw_cindex,
            censoring: d.censoring,
            max_weight: d.max_weight,
        }
    }
}

impl EvaluationConfig {
    pub fn options(&self, seed: u64) -> EvalOptions {
        EvalOptions {
            horizons: self.horizons.clone(),
            bootstrap: self.bootstrap,
            seed,
            ipcw_cindex: self.ipcw_cindex,
            censoring: self.censoring,
            max_weight: self.max_weight,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TransferConfig {
    pub strategies: Vec<Strategy>,
}

impl Default for TransferConfig {
    fn default() -> Self {
        Self {
            strategies: Strategy::ALL.to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PerturbConfig {
    pub kind: PerturbKind,
    pub radii: Vec<f64>,
    pub n_perturbations: usize,
}

impl Default for PerturbConfig {
    fn default() -> Self {
        Self {
            kind: PerturbKind::GapJitter,
            radii: vec![0.01, 0.05, 0.1],
            n_perturbations: 10,
        }
    }
}

impl ExperimentConfig {
    pub fn parse(text: &str, path: &Path) -> CliResult<Self> {
        toml::from_str(text).map_err(|e| {
            let line = e
                .span()
                .map_or(1, |s| text[..s.start.min(text.len())].matches('\n').count() + 1);
            CliError::ConfigParse {
                path: path.to_path_buf(),
                line,
                msg: e.message().to_string(),
            }
        })
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::parse(&text, path)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration serializes to TOML")
    }
}

/// One derived seed and the labels that produced it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeedEntry {
    pub labels: Vec<String>,
    pub value: u64,
}

/// Master seed plus every derivation requested during a run.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeedLog {
    pub master: u64,
    pub derived: Vec<SeedEntry>,
}

impl SeedLog {
    pub fn new(master: u64) -> Self {
        Self {
            master,
            derived: Vec::new(),
        }
    }

    pub fn derive(&mut self, labels: &[&str]) -> u64 {
        let value = seed::derive(self.master, labels);
        let labels: Vec<String> = labels.iter().map(|s| s.to_string()).collect();
        if !self.derived.iter().any(|e| e.labels == labels) {
            self.derived.push(SeedEntry { labels, value });
        }
        value
    }
}
