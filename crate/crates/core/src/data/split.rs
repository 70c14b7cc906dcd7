//! Patient-level train/validation/test splits.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::cohort::{EncounterSequence, Regime};
use crate::error::{Error, Result};
use crate::seed;

/// Indices into the cohort slice a split was built from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl Splits {
    pub fn select<'a>(cohort: &'a [EncounterSequence], idx: &[usize]) -> Vec<&'a EncounterSequence> {
        idx.iter().map(|&i| &cohort[i]).collect()
    }
}

fn check_frac(name: &str, f: f64) -> Result<()> {
    if f > 0.0 && f < 1.0 {
        Ok(())
    } else {
        Err(Error::Config(format!("{name} must lie in (0, 1), got {f}")))
    }
}

/// Shuffles `n` indices and cuts off `round(n·test_frac)` test patients, then
/// `round(rest·val_frac)` validation patients from the remainder.
pub fn split_indices(n: usize, test_frac: f64, val_frac: f64, seed: u64) -> Result<Splits> {
    check_frac("test_frac", test_frac)?;
    check_frac("val_frac", val_frac)?;
    let n_test = (n as f64 * test_frac).round() as usize;
    let n_val = ((n - n_test.min(n)) as f64 * val_frac).round() as usize;
    if n_test == 0 || n_val == 0 || n_test + n_val >= n {
        return Err(Error::Data(format!(
            "{n} patients are too few for non-empty splits (test {n_test}, validation {n_val})"
        )));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut seed::rng(seed, &["split"]));
    let test = idx[..n_test].to_vec();
    let val = idx[n_test..n_test + n_val].to_vec();
    let train = idx[n_test + n_val..].to_vec();
    Ok(Splits { train, val, test })
}

pub fn split_random(cohort: &[EncounterSequence], test_frac: f64, val_frac: f64, seed: u64) -> Result<Splits> {
    split_indices(cohort.len(), test_frac, val_frac, seed)
}

/// Per-regime splits with the larger regime's training set subsampled to
/// the size of the smaller one. Validation sets are carved from the training
/// sets after matching.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegimeSplits {
    pub a: Splits,
    pub b: Splits,
    /// Training sets before matching, for auditing the subsample.
    pub a_train_full: Vec<usize>,
    pub b_train_full: Vec<usize>,
}

impl RegimeSplits {
    pub fn get(&self, r: Regime) -> &Splits {
        match r {
            Regime::A => &self.a,
            Regime::B => &self.b,
        }
    }
}

pub fn split_regime_matched(
    cohort: &[EncounterSequence],
    test_frac: f64,
    val_frac: f64,
    seed: u64,
) -> Result<RegimeSplits> {
    check_frac("test_frac", test_frac)?;
    check_frac("val_frac", val_frac)?;
    let mut parts = Vec::new();
    for r in [Regime::A, Regime::B] {
        let mut idx: Vec<usize> = (0..cohort.len()).filter(|&i| cohort[i].regime == r).collect();
        if idx.is_empty() {
            return Err(Error::Data(format!("regime {r} has no patients")));
        }
        let n_test = (idx.len() as f64 * test_frac).round() as usize;
        if n_test == 0 || n_test >= idx.len() {
            return Err(Error::Data(format!(
                "regime {r}: {} patients give {n_test} test patients",
                idx.len()
            )));
        }
        idx.shuffle(&mut seed::rng(seed, &["regime-split", &r.to_string()]));
        let train = idx.split_off(n_test);
        parts.push((idx, train));
    }
    let (b_test, b_train_full) = parts.pop().expect("two regimes");
    let (a_test, a_train_full) = parts.pop().expect("two regimes");
    let target = a_train_full.len().min(b_train_full.len());
    let subsample = |full: &[usize], r: Regime| -> Vec<usize> {
        if full.len() == target {
            return full.to_vec();
        }
        let mut v = full.to_vec();
        v.shuffle(&mut seed::rng(seed, &["regime-match", &r.to_string()]));
        v.truncate(target);
        v
    };
    let carve = |train: Vec<usize>, test: Vec<usize>, r: Regime| -> Result<Splits> {
        let n_val = (train.len() as f64 * val_frac).round() as usize;
        if n_val == 0 || n_val >= train.len() {
            return Err(Error::Data(format!(
                "regime {r}: {} training patients give {n_val} validation patients",
                train.len()
            )));
        }
        let mut train = train;
        let val = train.split_off(train.len() - n_val);
        Ok(Splits { train, val, test })
    };
    Ok(RegimeSplits {
        a: carve(subsample(&a_train_full, Regime::A), a_test, Regime::A)?,
        b: carve(subsample(&b_train_full, Regime::B), b_test, Regime::B)?,
        a_train_full,
        b_train_full,
    })
}
