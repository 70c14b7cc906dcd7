use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use jointsurv::metrics::EvaluationReport;
use jointsurv::seed::digest_hex;
use jointsurv::trainer::SearchResult;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, SeedLog};
use crate::error::{CliError, CliResult};
use crate::experiment::{CohortSummary, PerturbReport, TransferTable};

pub const MANIFEST_FORMAT: &str = "jointsurv-manifest/1";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileDigest {
    /// File name without directories, so manifests compare across locations.
    pub name: String,
    pub sha256: String,
}

impl FileDigest {
    pub fn of(path: &Path) -> CliResult<Self> {
        let bytes = fs::read(path).map_err(|e| CliError::io(path, e))?;
        Ok(Self {
            name: path
                .file_name()
                .map_or_else(|| path.display().to_string(), |n| n.to_string_lossy().into_owned()),
            sha256: digest_hex(&bytes),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedReport {
    pub model: String,
    pub report: EvaluationReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub step: String,
    pub seconds: f64,
}

/// Everything needed to trace a reported number back to its seed, config
/// and inputs. Only `timings` varies between identical runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentManifest {
    pub format: String,
    pub command: String,
    pub config: ExperimentConfig,
    pub seeds: SeedLog,
    pub inputs: Vec<FileDigest>,
    pub outputs: Vec<FileDigest>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cohort_summary: Option<CohortSummary>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub reports: Vec<NamedReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub transfer: Option<TransferTable>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub perturbation: Option<PerturbReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub search: Option<SearchResult>,
    pub timings: Vec<Timing>,
}

impl ExperimentManifest {
    pub fn new(command: &str, config: ExperimentConfig, seeds: SeedLog) -> Self {
        Self {
            format: MANIFEST_FORMAT.into(),
            command: command.into(),
            config,
            seeds,
            inputs: Vec::new(),
            outputs: Vec::new(),
            cohort_summary: None,
            reports: Vec::new(),
            transfer: None,
            perturbation: None,
            search: None,
            timings: Vec::new(),
        }
    }

    /// Writes `manifest.json` into `dir`; an existing manifest is never
    /// replaced.
    pub fn write(&self, dir: &Path) -> CliResult<PathBuf> {
        let path = dir.join(MANIFEST_FILE);
        if path.exists() {
            return Err(CliError::Usage(format!(
                "{} already exists; manifests are never overwritten, choose a fresh --out",
                path.display()
            )));
        }
        let text = serde_json::to_string_pretty(self).map_err(|e| CliError::json(&path, e))?;
        write_atomic(&path, format!("{text}\n").as_bytes())?;
        Ok(path)
    }

    pub fn read(path: &Path) -> CliResult<Self> {
        let m: Self = read_json(path)?;
        if m.format != MANIFEST_FORMAT {
            return Err(CliError::Core(jointsurv::Error::Data(format!(
                "{}: manifest format {:?}, expected {MANIFEST_FORMAT:?}",
                path.display(),
                m.format
            ))));
        }
        Ok(m)
    }

    /// The manifest with wall-clock timings removed.
    pub fn without_timings(&self) -> Self {
        Self {
            timings: Vec::new(),
            ..self.clone()
        }
    }
}

/// Writes through a temporary sibling and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> CliResult<()> {
    let dir = path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    let name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    let tmp = dir.join(format!(".{name}.tmp"));
    let mut f = fs::File::create(&tmp).map_err(|e| CliError::io(&tmp, e))?;
    f.write_all(bytes)
        .and_then(|_| f.sync_all())
        .map_err(|e| CliError::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| CliError::io(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> CliResult<T> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::json(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::json(path, e))?;
    write_atomic(path, format!("{text}\n").as_bytes())
}
