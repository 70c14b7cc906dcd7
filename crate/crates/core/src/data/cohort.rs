//! Cohort records and their line-delimited JSON format.
//!
//! One patient per line:
//!
//! ```json
//! {"patient_id":"p1","times":[0.5,3.0],"labs":[[1.2,null],[null,4.0]],
//!  "label":{"time_days":12.5,"event":1},"regime":"A"}
//! ```
//!
//! `times` are hours since the start of the 24-hour window, strictly
//! increasing. `labs` holds one row per encounter; `null` marks a test that
//! was not performed. An optional `"format"` field must equal
//! [`COHORT_FORMAT`] when present.

use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::survival::SurvivalLabel;

pub const COHORT_FORMAT: &str = "jointsurv-cohort/1";
pub const WINDOW_HOURS: f64 = 24.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Regime {
    A,
    B,
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Regime::A => "A",
            Regime::B => "B",
        })
    }
}

/// One patient's irregular multivariate record.
#[derive(Debug, Clone, PartialEq)]
pub struct EncounterSequence {
    pub patient_id: String,
    pub times: Vec<f64>,
    /// Raw lab values; entries with a zero mask are never read.
    pub values: Vec<Vec<f64>>,
    pub mask: Vec<Vec<bool>>,
    pub label: SurvivalLabel,
    pub regime: Regime,
}

impl EncounterSequence {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn n_labs(&self) -> usize {
        self.mask.first().map_or(0, Vec::len)
    }

    /// Hours since the previous encounter; the first gap is measured from the
    /// start of the window.
    pub fn gaps(&self) -> Vec<f64> {
        let mut prev = 0.0;
        self.times
            .iter()
            .map(|&t| {
                let g = t - prev;
                prev = t;
                g
            })
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.times.is_empty() {
            return Err(Error::Data(format!("{}: no encounters", self.patient_id)));
        }
        if self.values.len() != self.times.len() || self.mask.len() != self.times.len() {
            return Err(Error::Data(format!(
                "{}: {} times but {} value rows and {} mask rows",
                self.patient_id,
                self.times.len(),
                self.values.len(),
                self.mask.len()
            )));
        }
        let k = self.n_labs();
        if k == 0 {
            return Err(Error::Data(format!("{}: no lab columns", self.patient_id)));
        }
        for (j, &t) in self.times.iter().enumerate() {
            if !(0.0..=WINDOW_HOURS).contains(&t) {
                return Err(Error::Data(format!(
                    "{}: encounter time {t} outside [0, {WINDOW_HOURS}]",
                    self.patient_id
                )));
            }
            if j > 0 && t <= self.times[j - 1] {
                return Err(Error::Data(format!(
                    "{}: encounter times must be strictly increasing",
                    self.patient_id
                )));
            }
            if self.values[j].len() != k || self.mask[j].len() != k {
                return Err(Error::Data(format!(
                    "{}: encounter {j} has a different number of labs",
                    self.patient_id
                )));
            }
            let bad = self.values[j]
                .iter()
                .zip(&self.mask[j])
                .any(|(v, &m)| m && !v.is_finite());
            if bad {
                return Err(Error::Data(format!(
                    "{}: non-finite lab value at encounter {j}",
                    self.patient_id
                )));
            }
        }
        self.label.validate()
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Record {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    format: Option<String>,
    patient_id: String,
    times: Vec<f64>,
    labs: Vec<Vec<Option<f64>>>,
    label: SurvivalLabel,
    regime: Regime,
}

impl From<&EncounterSequence> for Record {
    fn from(s: &EncounterSequence) -> Self {
        let labs = s
            .values
            .iter()
            .zip(&s.mask)
            .map(|(v, m)| v.iter().zip(m).map(|(&x, &o)| o.then_some(x)).collect())
            .collect();
        Record {
            format: Some(COHORT_FORMAT.to_string()),
            patient_id: s.patient_id.clone(),
            times: s.times.clone(),
            labs,
            label: s.label,
            regime: s.regime,
        }
    }
}

impl Record {
    fn into_sequence(self) -> Result<EncounterSequence> {
        if let Some(f) = &self.format {
            if f != COHORT_FORMAT {
                return Err(Error::Data(format!(
                    "unsupported cohort format `{f}`, expected `{COHORT_FORMAT}`"
                )));
            }
        }
        let mask = self
            .labs
            .iter()
            .map(|r| r.iter().map(Option::is_some).collect())
            .collect();
        let values = self
            .labs
            .iter()
            .map(|r| r.iter().map(|v| v.unwrap_or(0.0)).collect())
            .collect();
        let seq = EncounterSequence {
            patient_id: self.patient_id,
            times: self.times,
            values,
            mask,
            label: self.label,
            regime: self.regime,
        };
        seq.validate()?;
        Ok(seq)
    }
}

/// Parses a cohort, reporting the 1-based line of the first invalid record.
pub fn parse_cohort<R: BufRead>(reader: R) -> Result<Vec<EncounterSequence>> {
    let mut out: Vec<EncounterSequence> = Vec::new();
    let mut ids = std::collections::HashSet::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| Error::Parse {
            line: line_no,
            msg: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |msg: String| Error::Parse { line: line_no, msg };
        let rec: Record = serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
        let seq = rec.into_sequence().map_err(|e| parse_err(e.to_string()))?;
        if let Some(first) = out.first() {
            if first.n_labs() != seq.n_labs() {
                return Err(parse_err(format!(
                    "{} labs per encounter, earlier records have {}",
                    seq.n_labs(),
                    first.n_labs()
                )));
            }
        }
        if !ids.insert(seq.patient_id.clone()) {
            return Err(parse_err(format!("duplicate patient_id `{}`", seq.patient_id)));
        }
        out.push(seq);
    }
    if out.is_empty() {
        return Err(Error::Data("cohort is empty".into()));
    }
    Ok(out)
}

pub fn read_cohort(path: &Path) -> Result<Vec<EncounterSequence>> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    parse_cohort(BufReader::new(f))
}

pub fn write_cohort_to<W: Write>(mut w: W, cohort: &[EncounterSequence]) -> Result<()> {
    for s in cohort {
        let line =
            serde_json::to_string(&Record::from(s)).map_err(|e| Error::Data(format!("{}: {e}", s.patient_id)))?;
        writeln!(w, "{line}").map_err(|e| Error::io("<cohort>", e))?;
    }
    Ok(())
}

pub fn write_cohort(path: &Path, cohort: &[EncounterSequence]) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    write_cohort_to(&mut w, cohort)?;
    w.flush().map_err(|e| Error::io(path, e))
}
