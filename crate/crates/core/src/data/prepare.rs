//! Normalization, imputation and the per-strategy model inputs.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::cohort::{EncounterSequence, Regime, WINDOW_HOURS};
use crate::error::{Error, Result};
use crate::nn::{DecayInputs, SequenceInput};
use crate::presence::PresenceTarget;
use crate::survival::SurvivalLabel;

/// How raw sequences are turned into model inputs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Last,
    Count,
    Ignore,
    Resample,
    GruD,
    Feature,
    #[serde(rename = "deepjoint")]
    DeepJoint,
    /// Joint model with the inter-observation head only.
    #[serde(rename = "deepjoint_i")]
    DeepJointI,
    /// Joint model with the missingness head only.
    #[serde(rename = "deepjoint_m")]
    DeepJointM,
}

impl Strategy {
    pub const ALL: [Strategy; 9] = [
        Strategy::Last,
        Strategy::Count,
        Strategy::Ignore,
        Strategy::Resample,
        Strategy::GruD,
        Strategy::Feature,
        Strategy::DeepJoint,
        Strategy::DeepJointI,
        Strategy::DeepJointM,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            Strategy::Last => "last",
            Strategy::Count => "count",
            Strategy::Ignore => "ignore",
            Strategy::Resample => "resample",
            Strategy::GruD => "gru_d",
            Strategy::Feature => "feature",
            Strategy::DeepJoint => "deepjoint",
            Strategy::DeepJointI => "deepjoint_i",
            Strategy::DeepJointM => "deepjoint_m",
        }
    }

    /// Static strategies feed a vector straight to the survival head.
    pub fn is_static(self) -> bool {
        matches!(self, Strategy::Last | Strategy::Count)
    }

    pub fn uses_temporal_head(self) -> bool {
        matches!(self, Strategy::DeepJoint | Strategy::DeepJointI)
    }

    pub fn uses_missingness_head(self) -> bool {
        matches!(self, Strategy::DeepJoint | Strategy::DeepJointM)
    }

    /// Per-step (or static) input width for `k` labs.
    pub fn input_dim(self, k: usize) -> usize {
        match self {
            Strategy::Last | Strategy::Ignore | Strategy::Resample | Strategy::GruD => k,
            Strategy::Count => 2 * k,
            Strategy::Feature | Strategy::DeepJoint | Strategy::DeepJointI | Strategy::DeepJointM => 2 * k + 1,
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL.into_iter().find(|st| st.tag() == s).ok_or_else(|| {
            let tags: Vec<_> = Strategy::ALL.iter().map(|s| s.tag()).collect();
            Error::Config(format!("unknown strategy `{s}`; expected one of {}", tags.join(", ")))
        })
    }
}

/// Which split a set of statistics was fitted on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitRole {
    Train,
    Validation,
    Test,
}

/// Per-lab z-score statistics, fitted on training patients only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub means: Vec<f64>,
    pub stds: Vec<f64>,
    /// Statistics of the encounter gaps fed to the encoder as a feature.
    pub gap_mean: f64,
    pub gap_std: f64,
    pub fitted_on: SplitRole,
    pub n_patients: usize,
    /// SHA-256 over the sorted patient ids that produced these statistics.
    pub patients_digest: String,
}

fn std_or_one(sum: f64, sum_sq: f64, n: usize) -> (f64, f64) {
    if n == 0 {
        return (0.0, 1.0);
    }
    let mean = sum / n as f64;
    let var = (sum_sq / n as f64 - mean * mean).max(0.0);
    let sd = var.sqrt();
    (mean, if sd > 1e-12 { sd } else { 1.0 })
}

pub fn patients_digest<'a>(ids: impl Iterator<Item = &'a str>) -> String {
    let mut ids: Vec<&str> = ids.collect();
    ids.sort_unstable();
    let mut h = Sha256::new();
    for id in ids {
        h.update(id.as_bytes());
        h.update([0u8]);
    }
    crate::seed::hex(&h.finalize())
}

impl NormStats {
    pub fn fit(train: &[&EncounterSequence], role: SplitRole) -> Result<Self> {
        if role != SplitRole::Train {
            return Err(Error::Data(format!(
                "normalization statistics must come from the training split, got {role:?}"
            )));
        }
        let first = train
            .first()
            .ok_or_else(|| Error::Data("cannot fit statistics on an empty split".into()))?;
        let k = first.n_labs();
        let mut sum = vec![0.0; k];
        let mut sq = vec![0.0; k];
        let mut n = vec![0usize; k];
        let (mut gs, mut gq, mut gn) = (0.0, 0.0, 0usize);
        for s in train {
            for (row, m) in s.values.iter().zip(&s.mask) {
                for l in 0..k {
                    if m[l] {
                        sum[l] += row[l];
                        sq[l] += row[l] * row[l];
                        n[l] += 1;
                    }
                }
            }
            for g in s.gaps() {
                gs += g;
                gq += g * g;
                gn += 1;
            }
        }
        let (means, stds) = (0..k).map(|l| std_or_one(sum[l], sq[l], n[l])).unzip();
        let (gap_mean, gap_std) = std_or_one(gs, gq, gn);
        Ok(Self {
            means,
            stds,
            gap_mean,
            gap_std,
            fitted_on: role,
            n_patients: train.len(),
            patients_digest: patients_digest(train.iter().map(|s| s.patient_id.as_str())),
        })
    }

    pub fn n_labs(&self) -> usize {
        self.means.len()
    }

    fn z(&self, lab: usize, v: f64) -> f64 {
        (v - self.means[lab]) / self.stds[lab]
    }

    fn z_gap(&self, g: f64) -> f64 {
        (g - self.gap_mean) / self.gap_std
    }
}

/// Last-observation-carried-forward; labs never observed take `means`.
pub fn impute_locf(seq: &EncounterSequence, means: &[f64]) -> Result<Vec<Vec<f64>>> {
    let k = seq.n_labs();
    if means.len() != k {
        return Err(Error::Data(format!(
            "{} lab means for a sequence with {k} labs",
            means.len()
        )));
    }
    let mut last: Vec<Option<f64>> = vec![None; k];
    Ok(seq
        .values
        .iter()
        .zip(&seq.mask)
        .map(|(row, m)| {
            (0..k)
                .map(|l| {
                    if m[l] {
                        last[l] = Some(row[l]);
                    }
                    last[l].unwrap_or(means[l])
                })
                .collect()
        })
        .collect())
}

/// Hourly grid: within-hour means of observed values, carried forward over
/// empty hours, training means before the first observation.
pub fn resample_hourly(seq: &EncounterSequence, means: &[f64]) -> Result<Vec<Vec<f64>>> {
    let k = seq.n_labs();
    if means.len() != k {
        return Err(Error::Data(format!(
            "{} lab means for a sequence with {k} labs",
            means.len()
        )));
    }
    let slots = WINDOW_HOURS as usize;
    let mut sum = vec![vec![0.0; k]; slots];
    let mut cnt = vec![vec![0usize; k]; slots];
    for ((&t, row), m) in seq.times.iter().zip(&seq.values).zip(&seq.mask) {
        let slot = (t.floor() as usize).min(slots - 1);
        for l in 0..k {
            if m[l] {
                sum[slot][l] += row[l];
                cnt[slot][l] += 1;
            }
        }
    }
    let mut carry = means.to_vec();
    Ok((0..slots)
        .map(|h| {
            for l in 0..k {
                if cnt[h][l] > 0 {
                    carry[l] = sum[h][l] / cnt[h][l] as f64;
                }
            }
            carry.clone()
        })
        .collect())
}

/// Model input of one patient.
#[derive(Debug, Clone, PartialEq)]
pub enum ModelInput {
    Static(Vec<f64>),
    Sequence(SequenceInput),
}

impl ModelInput {
    pub fn as_sequence(&self) -> Option<&SequenceInput> {
        match self {
            ModelInput::Sequence(s) => Some(s),
            ModelInput::Static(_) => None,
        }
    }

    pub fn as_static(&self) -> Option<&[f64]> {
        match self {
            ModelInput::Static(v) => Some(v),
            ModelInput::Sequence(_) => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PreparedPatient {
    pub patient_id: String,
    pub regime: Regime,
    pub label: SurvivalLabel,
    pub input: ModelInput,
    /// One target per encounter: the next gap and mask, or the censored tail.
    pub targets: Vec<PresenceTarget>,
}

impl PreparedPatient {
    /// Number of observed (uncensored) intervals.
    pub fn n_intervals(&self) -> usize {
        self.targets.iter().filter(|t| !t.censored).count()
    }
}

#[derive(Debug, Clone)]
pub struct PreparedDataset {
    pub strategy: Strategy,
    pub stats: NormStats,
    pub patients: Vec<PreparedPatient>,
}

impl PreparedDataset {
    pub fn labels(&self) -> Vec<SurvivalLabel> {
        self.patients.iter().map(|p| p.label).collect()
    }

    pub fn len(&self) -> usize {
        self.patients.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patients.is_empty()
    }
}

/// Targets for every encounter: observed intervals `j → j+1` followed by the
/// censored interval from the last encounter to the end of the window.
pub fn presence_targets(seq: &EncounterSequence) -> Vec<PresenceTarget> {
    let mut out: Vec<PresenceTarget> = (1..seq.len())
        .map(|j| PresenceTarget {
            next_gap: seq.times[j] - seq.times[j - 1],
            next_mask: seq.mask[j].iter().map(|&m| f64::from(u8::from(m))).collect(),
            censored: false,
        })
        .collect();
    let tail = (WINDOW_HOURS - seq.times[seq.len() - 1]).max(0.0);
    out.push(PresenceTarget {
        next_gap: tail,
        next_mask: Vec::new(),
        censored: true,
    });
    out
}

fn normalize_rows(rows: &[Vec<f64>], stats: &NormStats) -> Vec<Vec<f64>> {
    rows.iter()
        .map(|r| r.iter().enumerate().map(|(l, &v)| stats.z(l, v)).collect())
        .collect()
}

/// Builds the model input of one sequence for `strategy`.
pub fn prepare(seq: &EncounterSequence, strategy: Strategy, stats: &NormStats) -> Result<ModelInput> {
    if stats.fitted_on != SplitRole::Train {
        return Err(Error::Data("statistics were not fitted on the training split".into()));
    }
    let k = seq.n_labs();
    if k != stats.n_labs() {
        return Err(Error::Data(format!(
            "{}: {k} labs, statistics cover {}",
            seq.patient_id,
            stats.n_labs()
        )));
    }
    let imputed = || impute_locf(seq, &stats.means).map(|r| normalize_rows(&r, stats));
    let masks = || -> Vec<Vec<f64>> {
        seq.mask
            .iter()
            .map(|m| m.iter().map(|&o| f64::from(u8::from(o))).collect())
            .collect()
    };
    Ok(match strategy {
        Strategy::Last => ModelInput::Static(imputed()?.pop().expect("non-empty sequence")),
        Strategy::Count => {
            let mut v = imputed()?.pop().expect("non-empty sequence");
            for l in 0..k {
                v.push(seq.mask.iter().filter(|m| m[l]).count() as f64);
            }
            ModelInput::Static(v)
        }
        Strategy::Ignore => ModelInput::Sequence(SequenceInput {
            x: imputed()?,
            decay: None,
        }),
        Strategy::Resample => ModelInput::Sequence(SequenceInput {
            x: normalize_rows(&resample_hourly(seq, &stats.means)?, stats),
            decay: None,
        }),
        Strategy::Feature | Strategy::DeepJoint | Strategy::DeepJointI | Strategy::DeepJointM => {
            let x = imputed()?
                .into_iter()
                .zip(masks())
                .zip(seq.gaps())
                .map(|((mut v, m), g)| {
                    v.extend(m);
                    v.push(stats.z_gap(g));
                    v
                })
                .collect();
            ModelInput::Sequence(SequenceInput { x, decay: None })
        }
        Strategy::GruD => ModelInput::Sequence(gru_d_input(seq, stats)),
    })
}

/// Observed values, masks, per-lab time since last measurement and the last
/// measured (normalized) value; unobserved history uses the training mean,
/// which is zero after normalization.
fn gru_d_input(seq: &EncounterSequence, stats: &NormStats) -> SequenceInput {
    let k = seq.n_labs();
    let mut last_t = vec![0.0; k];
    let mut last_v = vec![0.0; k];
    let mut dec = DecayInputs::default();
    let mut x = Vec::with_capacity(seq.len());
    for ((&t, row), m) in seq.times.iter().zip(&seq.values).zip(&seq.mask) {
        dec.delta.push(last_t.iter().map(|&lt| t - lt).collect());
        dec.x_last.push(last_v.clone());
        dec.mask.push(m.iter().map(|&o| f64::from(u8::from(o))).collect());
        x.push((0..k).map(|l| if m[l] { stats.z(l, row[l]) } else { 0.0 }).collect());
        for l in 0..k {
            if m[l] {
                last_t[l] = t;
                last_v[l] = stats.z(l, row[l]);
            }
        }
    }
    SequenceInput { x, decay: Some(dec) }
}

/// Prepares every sequence of `split` with statistics from the training split.
pub fn prepare_dataset(split: &[&EncounterSequence], strategy: Strategy, stats: &NormStats) -> Result<PreparedDataset> {
    let patients = split
        .iter()
        .map(|s| {
            Ok(PreparedPatient {
                patient_id: s.patient_id.clone(),
                regime: s.regime,
                label: s.label,
                input: prepare(s, strategy, stats)?,
                targets: presence_targets(s),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(PreparedDataset {
        strategy,
        stats: stats.clone(),
        patients,
    })
}
