use std::fmt::Write as _;
use std::str::FromStr;

use jointsurv::data::{
    patients_digest, prepare_dataset, split_regime_matched, EncounterSequence, NormStats, PreparedDataset, Regime,
    RegimeSplits, SplitRole, Splits, Strategy, WINDOW_HOURS,
};
use jointsurv::metrics::{
    bootstrap, cindex_integrated, evaluate, transfer_loss, CoxPredictions, EvalOptions, EvaluationReport, TaggedMetric,
};
use jointsurv::seed;
use jointsurv::survival::{BreslowTable, SurvivalLabel};
use jointsurv::trainer::{dataset_losses, train_joint, JointModel, LossParts, TrainConfig, TrainHistory};
use jointsurv::{Error, Result};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::manifest::NamedReport;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegimeSummary {
    pub regime: Regime,
    pub n_patients: usize,
    pub mean_encounters: f64,
    pub mean_gap_hours: f64,
    /// Share of lab entries that were measured.
    pub observed_fraction: f64,
    pub event_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortSummary {
    pub n_patients: usize,
    pub regimes: Vec<RegimeSummary>,
}

pub fn summarize(cohort: &[EncounterSequence]) -> CohortSummary {
    let mut regimes = Vec::new();
    for r in [Regime::A, Regime::B] {
        let pats: Vec<&EncounterSequence> = cohort.iter().filter(|p| p.regime == r).collect();
        if pats.is_empty() {
            continue;
        }
        let n = pats.len() as f64;
        let encounters: usize = pats.iter().map(|p| p.len()).sum();
        let gaps: Vec<f64> = pats.iter().flat_map(|p| p.gaps().into_iter().skip(1)).collect();
        let entries: usize = pats.iter().map(|p| p.len() * p.n_labs()).sum();
        let observed: usize = pats
            .iter()
            .map(|p| p.mask.iter().flatten().filter(|&&m| m).count())
            .sum();
        regimes.push(RegimeSummary {
            regime: r,
            n_patients: pats.len(),
            mean_encounters: encounters as f64 / n,
            mean_gap_hours: if gaps.is_empty() {
                f64::NAN
            } else {
                gaps.iter().sum::<f64>() / gaps.len() as f64
            },
            observed_fraction: observed as f64 / entries.max(1) as f64,
            event_rate: pats.iter().filter(|p| p.label.event).count() as f64 / n,
        });
    }
    CohortSummary {
        n_patients: cohort.len(),
        regimes,
    }
}

/// Tag identifying a test set by its patients.
pub fn test_set_name(label: &str, cohort: &[EncounterSequence], idx: &[usize]) -> String {
    let digest = patients_digest(idx.iter().map(|&i| cohort[i].patient_id.as_str()));
    format!("{label}:{}", &digest[..12])
}

pub fn prepare_subset(
    cohort: &[EncounterSequence],
    idx: &[usize],
    strategy: Strategy,
    stats: &NormStats,
) -> Result<PreparedDataset> {
    prepare_dataset(&Splits::select(cohort, idx), strategy, stats)
}

/// Fits normalisation on the training split and trains a fresh model.
pub fn train_on(
    cohort: &[EncounterSequence],
    splits: &Splits,
    strategy: Strategy,
    cfg: &TrainConfig,
) -> Result<(JointModel, TrainHistory)> {
    let stats = NormStats::fit(&Splits::select(cohort, &splits.train), SplitRole::Train)?;
    let train = prepare_subset(cohort, &splits.train, strategy, &stats)?;
    let val = prepare_subset(cohort, &splits.val, strategy, &stats)?;
    let mut model = JointModel::new(strategy, stats, cfg)?;
    let history = train_joint(&mut model, &train, &val, cfg)?;
    Ok((model, history))
}

/// Log-hazards and labels of a model on a subset of the cohort.
pub struct Scored {
    pub eta: Vec<f64>,
    pub labels: Vec<SurvivalLabel>,
}

pub fn score(model: &JointModel, cohort: &[EncounterSequence], idx: &[usize]) -> Result<Scored> {
    let data = prepare_subset(cohort, idx, model.strategy, &model.stats)?;
    let patients: Vec<_> = data.patients.iter().collect();
    Ok(Scored {
        eta: model.log_hazards(&patients)?,
        labels: data.labels(),
    })
}

pub fn evaluate_scored(
    scored: &Scored,
    table: &BreslowTable,
    train_labels: Option<&[SurvivalLabel]>,
    opts: &EvalOptions,
    test_set: &str,
) -> Result<EvaluationReport> {
    let pred = CoxPredictions {
        eta: &scored.eta,
        table,
    };
    evaluate(
        &|i, t| pred.survival(i, t),
        &scored.labels,
        train_labels,
        opts,
        test_set,
    )
}

/// One Transfer or Internal cell: full-set value plus bootstrap spread.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub point: f64,
    pub mean: f64,
    pub std: f64,
}

impl Cell {
    fn of(report: &EvaluationReport) -> Self {
        Self {
            point: report.point_integrated(),
            mean: report.integrated_cindex.mean,
            std: report.integrated_cindex.std,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferRow {
    pub strategy: Strategy,
    pub test_regime: Regime,
    /// Trained on the other regime.
    pub transfer: Cell,
    /// Trained on the test regime.
    pub internal: Cell,
    /// `|transfer − internal|` on the full test set.
    pub difference: f64,
    /// `sqrt(std_T² + std_I²)`.
    pub difference_std: f64,
    /// Spread of the signed difference over shared resamples.
    pub paired_std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferTable {
    pub metric: String,
    pub rows: Vec<TransferRow>,
}

impl TransferTable {
    pub fn row(&self, strategy: Strategy, test_regime: Regime) -> Option<&TransferRow> {
        self.rows
            .iter()
            .find(|r| r.strategy == strategy && r.test_regime == test_regime)
    }

    /// Recomputes every Difference cell from its Transfer and Internal cells.
    pub fn check(&self) -> Result<()> {
        for r in &self.rows {
            let want = (r.transfer.point - r.internal.point).abs();
            if want != r.difference {
                return Err(Error::Numerical(format!(
                    "{} on {}: difference {} but |transfer − internal| = {want}",
                    r.strategy, r.test_regime, r.difference
                )));
            }
        }
        Ok(())
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{}", self.metric);
        let _ = writeln!(
            s,
            "{:<12} {:>4}  {:>16}  {:>16}  {:>16}",
            "strategy", "test", "Transfer", "Internal", "Difference"
        );
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{:<12} {:>4}  {:>7.4} ± {:<6.4}  {:>7.4} ± {:<6.4}  {:>7.4} ± {:<6.4}",
                r.strategy.tag(),
                r.test_regime.to_string(),
                r.transfer.point,
                r.transfer.std,
                r.internal.point,
                r.internal.std,
                r.difference,
                r.difference_std
            );
        }
        s
    }
}

fn integrated_on(eta: &[f64], table: &BreslowTable, labels: &[SurvivalLabel], idx: &[usize]) -> Result<f64> {
    let sub: Vec<SurvivalLabel> = idx.iter().map(|&i| labels[i]).collect();
    let eta: Vec<f64> = idx.iter().map(|&i| eta[i]).collect();
    let max_t = sub.iter().map(|l| l.time).fold(0.0, f64::max);
    let pred = CoxPredictions { eta: &eta, table };
    cindex_integrated(|i, t| pred.survival(i, t), &sub, max_t)
}

pub struct TransferRun {
    pub splits: RegimeSplits,
    pub table: TransferTable,
    /// `"{strategy} train {r} test {q}"` reports.
    pub reports: Vec<NamedReport>,
    pub histories: Vec<(String, TrainHistory)>,
}

/// For each strategy, trains on the matched regime-A and regime-B training
/// sets and scores both models on both test sets.
pub fn transfer_experiment(
    cohort: &[EncounterSequence],
    strategies: &[Strategy],
    cfg: &TrainConfig,
    test_fraction: f64,
    val_fraction: f64,
    split_seed: u64,
    opts: &EvalOptions,
) -> Result<TransferRun> {
    if strategies.is_empty() {
        return Err(Error::Config("no strategies to transfer".into()));
    }
    let splits = split_regime_matched(cohort, test_fraction, val_fraction, split_seed)?;
    let regimes = [Regime::A, Regime::B];
    let mut rows = Vec::new();
    let mut reports = Vec::new();
    let mut histories = Vec::new();
    for &strategy in strategies {
        let mut models = Vec::new();
        for r in regimes {
            let (model, history) = train_on(cohort, splits.get(r), strategy, cfg)?;
            histories.push((format!("{strategy} train {r}"), history));
            models.push(model);
        }
        for (qi, q) in regimes.into_iter().enumerate() {
            let test = &splits.get(q).test;
            let name = test_set_name(&format!("{q}-test"), cohort, test);
            let mut scored = Vec::new();
            let mut cells = Vec::new();
            for (ri, r) in regimes.into_iter().enumerate() {
                let model = &models[ri];
                let s = score(model, cohort, test)?;
                let train_labels: Vec<SurvivalLabel> = splits.get(r).train.iter().map(|&i| cohort[i].label).collect();
                let report = evaluate_scored(&s, model.breslow()?, Some(&train_labels), opts, &name)?;
                log::info!(
                    "{strategy} train {r} test {q}: integrated C-index {:.4}",
                    report.point_integrated()
                );
                cells.push(Cell::of(&report));
                reports.push(NamedReport {
                    model: format!("{strategy} train {r} test {q}"),
                    report,
                });
                scored.push(s);
            }
            let (internal, transfer) = (cells[qi], cells[1 - qi]);
            let difference = transfer_loss(
                &TaggedMetric {
                    value: internal.point,
                    test_set: name.clone(),
                },
                &TaggedMetric {
                    value: transfer.point,
                    test_set: name.clone(),
                },
            )?;
            let (mi, mt) = (&models[qi], &models[1 - qi]);
            let (si, st) = (&scored[qi], &scored[1 - qi]);
            let paired = bootstrap(test.len(), opts.bootstrap, opts.seed, |idx| {
                let ct = integrated_on(&st.eta, mt.breslow()?, &st.labels, idx)?;
                let ci = integrated_on(&si.eta, mi.breslow()?, &si.labels, idx)?;
                Ok(vec![ct - ci])
            })?;
            rows.push(TransferRow {
                strategy,
                test_regime: q,
                transfer,
                internal,
                difference,
                difference_std: transfer.std.hypot(internal.std),
                paired_std: paired[0].std,
            });
        }
    }
    let table = TransferTable {
        metric: "integrated C-index".into(),
        rows,
    };
    table.check()?;
    Ok(TransferRun {
        splits,
        table,
        reports,
        histories,
    })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PerturbKind {
    /// Multiply every gap by `exp(u)`, `u ~ U(−r, r)`.
    #[default]
    GapJitter,
    /// Drop each measured entry with probability `r` and re-impute.
    MaskDropout,
}

impl PerturbKind {
    pub fn tag(self) -> &'static str {
        match self {
            PerturbKind::GapJitter => "gap-jitter",
            PerturbKind::MaskDropout => "mask-dropout",
        }
    }
}

impl FromStr for PerturbKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gap-jitter" => Ok(PerturbKind::GapJitter),
            "mask-dropout" => Ok(PerturbKind::MaskDropout),
            _ => Err(Error::Config(format!(
                "unknown perturbation {s:?}; expected gap-jitter or mask-dropout"
            ))),
        }
    }
}

fn check_radius(kind: PerturbKind, r: f64) -> Result<()> {
    let ok = match kind {
        PerturbKind::GapJitter => r >= 0.0 && r.is_finite(),
        PerturbKind::MaskDropout => (0.0..=1.0).contains(&r),
    };
    if ok {
        Ok(())
    } else {
        Err(Error::Config(format!("radius {r} is invalid for {}", kind.tag())))
    }
}

/// A perturbed copy of `seq`. Jittered encounters pushed past the window
/// are dropped; `r = 0` returns the sequence unchanged.
pub fn perturb_sequence<R: Rng + ?Sized>(
    seq: &EncounterSequence,
    kind: PerturbKind,
    r: f64,
    rng: &mut R,
) -> Result<EncounterSequence> {
    check_radius(kind, r)?;
    let mut out = seq.clone();
    if r == 0.0 {
        return Ok(out);
    }
    match kind {
        PerturbKind::GapJitter => {
            let mut t = 0.0;
            let mut keep = 0;
            for (j, g) in seq.gaps().into_iter().enumerate() {
                t += g * rng.random_range(-r..r).exp();
                if t > WINDOW_HOURS {
                    break;
                }
                out.times[j] = t;
                keep = j + 1;
            }
            if keep == 0 {
                return Err(Error::Data(format!(
                    "{}: gap jitter of radius {r} leaves no encounter inside the window",
                    seq.patient_id
                )));
            }
            out.times.truncate(keep);
            out.values.truncate(keep);
            out.mask.truncate(keep);
        }
        PerturbKind::MaskDropout => {
            for m in out.mask.iter_mut().flatten() {
                if *m && rng.random_bool(r) {
                    *m = false;
                }
            }
        }
    }
    Ok(out)
}

/// Mean absolute change of each loss over perturbed copies of a test set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerturbRow {
    pub kind: PerturbKind,
    pub radius: f64,
    pub n_perturbations: usize,
    pub survival: f64,
    pub temporal: Option<f64>,
    pub missingness: Option<f64>,
    pub combined: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerturbReport {
    pub strategy: Strategy,
    pub n_patients: usize,
    pub baseline: LossParts,
    pub rows: Vec<PerturbRow>,
}

/// Empirical loss sensitivity of a trained model to changes of the
/// observation process. Copy `c` at radius `r` draws from the stream
/// `["perturb", kind, r, c]`.
pub fn perturbation_probe(
    model: &JointModel,
    cfg: &TrainConfig,
    test: &[&EncounterSequence],
    kind: PerturbKind,
    radii: &[f64],
    n_perturbations: usize,
    seed: u64,
) -> Result<PerturbReport> {
    if n_perturbations == 0 {
        return Err(Error::Config("at least one perturbation is required".into()));
    }
    for &r in radii {
        check_radius(kind, r)?;
    }
    let base_data = prepare_dataset(test, model.strategy, &model.stats)?;
    let baseline = dataset_losses(model, &base_data, cfg)?;
    let mut rows = Vec::with_capacity(radii.len());
    for &r in radii {
        let mut sums = [0.0; 4];
        for c in 0..n_perturbations {
            let mut rng = seed::rng(seed, &["perturb", kind.tag(), &r.to_string(), &c.to_string()]);
            let copies = test
                .iter()
                .map(|s| perturb_sequence(s, kind, r, &mut rng))
                .collect::<Result<Vec<_>>>()?;
            let refs: Vec<&EncounterSequence> = copies.iter().collect();
            let data = prepare_dataset(&refs, model.strategy, &model.stats)?;
            let l = dataset_losses(model, &data, cfg)?;
            let delta = |a: Option<f64>, b: Option<f64>| match (a, b) {
                (Some(a), Some(b)) => (a - b).abs(),
                _ => 0.0,
            };
            sums[0] += delta(l.survival, baseline.survival);
            sums[1] += delta(l.temporal, baseline.temporal);
            sums[2] += delta(l.missingness, baseline.missingness);
            sums[3] += (l.combined - baseline.combined).abs();
        }
        let n = n_perturbations as f64;
        rows.push(PerturbRow {
            kind,
            radius: r,
            n_perturbations,
            survival: sums[0] / n,
            temporal: baseline.temporal.map(|_| sums[1] / n),
            missingness: baseline.missingness.map(|_| sums[2] / n),
            combined: sums[3] / n,
        });
    }
    Ok(PerturbReport {
        strategy: model.strategy,
        n_patients: test.len(),
        baseline,
        rows,
    })
}

/// Median of a non-empty sample.
pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}
