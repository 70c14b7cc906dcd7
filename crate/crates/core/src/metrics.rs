//! Concordance, IPCW Brier score, bootstrap and transfer loss.
//!
//! Survival curves are passed as `Fn(patient, t) -> S(t | patient)` so the
//! metrics do not depend on how predictions were produced.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;
use crate::survival::{predict_survival, BreslowTable, SurvivalLabel};
use rand::Rng;

/// Kaplan–Meier estimate of the censoring distribution `G(t) = P(C > t)`.
///
/// At tied times events are taken to precede censorings, so a censoring at
/// `t` still sees the events at `t` in its risk set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CensoringKm {
    times: Vec<f64>,
    /// `G` just after each censoring time.
    surv: Vec<f64>,
}

impl CensoringKm {
    pub fn fit(labels: &[SurvivalLabel]) -> Self {
        let mut t: Vec<f64> = labels.iter().map(|l| l.time).collect();
        t.sort_by(f64::total_cmp);
        t.dedup();
        let mut times = Vec::new();
        let mut surv = Vec::new();
        let mut g = 1.0;
        for &u in &t {
            let at_risk = labels.iter().filter(|l| l.time >= u).count();
            let censored = labels.iter().filter(|l| l.time == u && !l.event).count();
            if censored > 0 {
                g *= 1.0 - censored as f64 / at_risk as f64;
                times.push(u);
                surv.push(g);
            }
        }
        Self { times, surv }
    }

    /// `G(t)`, right-continuous.
    pub fn at(&self, t: f64) -> f64 {
        let k = self.times.partition_point(|&u| u <= t);
        if k == 0 {
            1.0
        } else {
            self.surv[k - 1]
        }
    }

    /// `G(t−)`.
    pub fn before(&self, t: f64) -> f64 {
        let k = self.times.partition_point(|&u| u < t);
        if k == 0 {
            1.0
        } else {
            self.surv[k - 1]
        }
    }
}

fn check_len(n: usize, labels: &[SurvivalLabel]) -> Result<()> {
    if n != labels.len() {
        return Err(Error::Data(format!("{n} predictions for {} labels", labels.len())));
    }
    Ok(())
}

fn check_horizon(h: f64) -> Result<()> {
    if h.is_finite() && h > 0.0 {
        Ok(())
    } else {
        Err(Error::Domain(format!("horizon must be positive, got {h}")))
    }
}

fn pair_score(a: f64, b: f64) -> f64 {
    if a > b {
        1.0
    } else if a == b {
        0.5
    } else {
        0.0
    }
}

/// Truncated concordance at `horizon`: pairs with `t_i < t_j`, `t_i ≤ horizon`
/// and an event at `t_i`, scored on `risk_i > risk_j` with ties counted 0.5.
/// With `censoring`, pairs are weighted by `G(t_i−)^-2`.
pub fn cindex_td_weighted(
    risk: &[f64],
    labels: &[SurvivalLabel],
    horizon: f64,
    censoring: Option<&CensoringKm>,
) -> Result<f64> {
    check_len(risk.len(), labels)?;
    check_horizon(horizon)?;
    let (mut num, mut den) = (0.0, 0.0);
    for (i, li) in labels.iter().enumerate() {
        if !li.event || li.time > horizon {
            continue;
        }
        let w = match censoring {
            Some(g) => {
                let gi = g.before(li.time);
                if gi <= 0.0 {
                    return Err(Error::Domain(format!(
                        "censoring survival is zero before t = {}",
                        li.time
                    )));
                }
                1.0 / (gi * gi)
            }
            None => 1.0,
        };
        for (j, lj) in labels.iter().enumerate() {
            if li.time < lj.time {
                num += w * pair_score(risk[i], risk[j]);
                den += w;
            }
        }
    }
    if den == 0.0 {
        return Err(Error::NoComparablePairs { horizon });
    }
    Ok(num / den)
}

pub fn cindex_td(risk: &[f64], labels: &[SurvivalLabel], horizon: f64) -> Result<f64> {
    cindex_td_weighted(risk, labels, horizon, None)
}

/// Concordance aggregated over event times: each comparable pair is scored
/// on `1 − S(t_i | ·)` at the earlier patient's event time.
pub fn cindex_integrated(surv: impl Fn(usize, f64) -> f64, labels: &[SurvivalLabel], max_horizon: f64) -> Result<f64> {
    check_horizon(max_horizon)?;
    let (mut num, mut den) = (0.0, 0.0);
    for (i, li) in labels.iter().enumerate() {
        if !li.event || li.time > max_horizon {
            continue;
        }
        let ri = 1.0 - surv(i, li.time);
        for (j, lj) in labels.iter().enumerate() {
            if li.time < lj.time {
                num += pair_score(ri, 1.0 - surv(j, li.time));
                den += 1.0;
            }
        }
    }
    if den == 0.0 {
        return Err(Error::NoComparablePairs { horizon: max_horizon });
    }
    Ok(num / den)
}

/// Graf's inverse-probability-of-censoring weighted Brier score at `horizon`.
/// Weights are capped at `max_weight` when given.
pub fn brier(
    surv: impl Fn(usize, f64) -> f64,
    labels: &[SurvivalLabel],
    horizon: f64,
    censoring: &CensoringKm,
    max_weight: Option<f64>,
) -> Result<f64> {
    check_horizon(horizon)?;
    if labels.is_empty() {
        return Err(Error::Data("no patients to score".into()));
    }
    let g_h = censoring.at(horizon);
    let cap = |w: f64| max_weight.map_or(w, |m| w.min(m));
    let mut total = 0.0;
    for (i, l) in labels.iter().enumerate() {
        let s = surv(i, horizon);
        if l.time <= horizon && l.event {
            let g = censoring.before(l.time);
            if g <= 0.0 {
                return Err(Error::Domain(format!(
                    "censoring survival is zero before t = {}",
                    l.time
                )));
            }
            total += cap(1.0 / g) * s * s;
        } else if l.time > horizon {
            if g_h <= 0.0 {
                return Err(Error::Domain(format!(
                    "censoring survival is zero at horizon {horizon}; weights undefined"
                )));
            }
            total += cap(1.0 / g_h) * (1.0 - s) * (1.0 - s);
        }
    }
    Ok(total / labels.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    /// Mean and sample standard deviation (zero for a single value).
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() < 2 {
            0.0
        } else {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        };
        Self { mean, std }
    }
}

pub const BOOTSTRAP_RETRIES: usize = 10;

/// Resamples patient indices with replacement and evaluates `metrics` on each
/// resample. A resample on which `metrics` fails is replaced, up to
/// [`BOOTSTRAP_RETRIES`] times per iteration.
pub fn bootstrap<F>(n: usize, iters: usize, seed: u64, metrics: F) -> Result<Vec<MeanStd>>
where
    F: Fn(&[usize]) -> Result<Vec<f64>>,
{
    if iters < 2 {
        return Err(Error::Config(format!(
            "bootstrap needs at least 2 iterations, got {iters}"
        )));
    }
    if n == 0 {
        return Err(Error::Data("cannot bootstrap an empty set".into()));
    }
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(iters);
    for it in 0..iters {
        let mut rng = seed::rng(seed, &["bootstrap", &it.to_string()]);
        let mut attempt = 0;
        loop {
            let idx: Vec<usize> = (0..n).map(|_| rng.random_range(0..n)).collect();
            match metrics(&idx) {
                Ok(v) => {
                    rows.push(v);
                    break;
                }
                Err(e) if attempt < BOOTSTRAP_RETRIES => {
                    log::warn!("bootstrap iteration {it}: resample skipped ({e})");
                    attempt += 1;
                }
                Err(e) => return Err(e),
            }
        }
    }
    let width = rows[0].len();
    Ok((0..width)
        .map(|k| MeanStd::of(&rows.iter().map(|r| r[k]).collect::<Vec<_>>()))
        .collect())
}

/// A metric value tagged with the identity of the test set it came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaggedMetric {
    pub value: f64,
    pub test_set: String,
}

/// `|internal − transferred|`; both must come from the same test set.
pub fn transfer_loss(internal: &TaggedMetric, transferred: &TaggedMetric) -> Result<f64> {
    if internal.test_set != transferred.test_set {
        return Err(Error::Data(format!(
            "transfer loss compares different test sets ({} vs {})",
            internal.test_set, transferred.test_set
        )));
    }
    Ok((internal.value - transferred.value).abs())
}

/// Where the Brier censoring distribution is estimated.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CensoringSource {
    #[default]
    Evaluation,
    Train,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalOptions {
    pub horizons: Vec<f64>,
    pub bootstrap: usize,
    pub seed: u64,
    /// Weight horizon concordance pairs by inverse censoring probability.
    #[serde(default)]
    pub ipcw_cindex: bool,
    #[serde(default)]
    pub censoring: CensoringSource,
    #[serde(default)]
    pub max_weight: Option<f64>,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            horizons: vec![7.0, 30.0],
            bootstrap: 100,
            seed: 0,
            ipcw_cindex: false,
            censoring: CensoringSource::Evaluation,
            max_weight: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HorizonMetrics {
    pub horizon_days: f64,
    pub cindex: MeanStd,
    pub brier: MeanStd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub horizons: Vec<HorizonMetrics>,
    pub integrated_cindex: MeanStd,
    /// Point estimates on the full test set, in the order
    /// `[c(h1), brier(h1), c(h2), brier(h2), ..., integrated]`.
    pub point: Vec<f64>,
    pub bootstrap: usize,
    pub n_patients: usize,
    pub test_set: String,
}

impl EvaluationReport {
    pub fn integrated(&self) -> TaggedMetric {
        TaggedMetric {
            value: self.integrated_cindex.mean,
            test_set: self.test_set.clone(),
        }
    }

    pub fn point_integrated(&self) -> f64 {
        *self.point.last().expect("report has an integrated value")
    }
}

/// Cox predictions for a test set: per-patient log-hazards plus a baseline.
pub struct CoxPredictions<'a> {
    pub eta: &'a [f64],
    pub table: &'a BreslowTable,
}

impl CoxPredictions<'_> {
    pub fn survival(&self, i: usize, t: f64) -> f64 {
        predict_survival(self.table, self.eta[i], t).expect("non-negative evaluation time")
    }
}

fn point_metrics(
    surv: &dyn Fn(usize, f64) -> f64,
    labels: &[SurvivalLabel],
    opts: &EvalOptions,
    train_km: Option<&CensoringKm>,
) -> Result<Vec<f64>> {
    let own;
    let km = match train_km {
        Some(k) => k,
        None => {
            own = CensoringKm::fit(labels);
            &own
        }
    };
    let mut out = Vec::with_capacity(2 * opts.horizons.len() + 1);
    for &h in &opts.horizons {
        let risk: Vec<f64> = (0..labels.len()).map(|i| 1.0 - surv(i, h)).collect();
        out.push(cindex_td_weighted(&risk, labels, h, opts.ipcw_cindex.then_some(km))?);
        out.push(brier(surv, labels, h, km, opts.max_weight)?);
    }
    let max_t = labels.iter().map(|l| l.time).fold(0.0, f64::max);
    out.push(cindex_integrated(surv, labels, max_t)?);
    Ok(out)
}

/// Full report with bootstrap spreads over test-set resamples.
///
/// `train_labels` supplies the censoring distribution when
/// [`CensoringSource::Train`] is selected.
pub fn evaluate(
    surv: &dyn Fn(usize, f64) -> f64,
    labels: &[SurvivalLabel],
    train_labels: Option<&[SurvivalLabel]>,
    opts: &EvalOptions,
    test_set: &str,
) -> Result<EvaluationReport> {
    if opts.horizons.is_empty() {
        return Err(Error::Config("at least one horizon is required".into()));
    }
    let max_t = labels.iter().map(|l| l.time).fold(0.0, f64::max);
    for &h in &opts.horizons {
        check_horizon(h)?;
        if h > max_t {
            return Err(Error::Domain(format!(
                "horizon {h} days lies beyond the longest follow-up ({max_t:.3} days)"
            )));
        }
    }
    let train_km = match opts.censoring {
        CensoringSource::Evaluation => None,
        CensoringSource::Train => {
            Some(CensoringKm::fit(train_labels.ok_or_else(|| {
                Error::Config("train-split censoring requested without training labels".into())
            })?))
        }
    };
    let point = point_metrics(surv, labels, opts, train_km.as_ref())?;
    let stats = bootstrap(labels.len(), opts.bootstrap, opts.seed, |idx| {
        let sub: Vec<SurvivalLabel> = idx.iter().map(|&i| labels[i]).collect();
        let s = |k: usize, t: f64| surv(idx[k], t);
        point_metrics(&s, &sub, opts, train_km.as_ref())
    })?;
    let horizons = opts
        .horizons
        .iter()
        .enumerate()
        .map(|(k, &h)| HorizonMetrics {
            horizon_days: h,
            cindex: stats[2 * k],
            brier: stats[2 * k + 1],
        })
        .collect();
    Ok(EvaluationReport {
        horizons,
        integrated_cindex: *stats.last().expect("integrated metric"),
        point,
        bootstrap: opts.bootstrap,
        n_patients: labels.len(),
        test_set: test_set.to_string(),
    })
}
