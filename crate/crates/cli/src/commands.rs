use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use jointsurv::data::{read_cohort, split_random, write_cohort, EncounterSequence, Regime, Splits, Strategy};
use jointsurv::metrics::{evaluate, CoxPredictions, EvalOptions, EvaluationReport};
use jointsurv::survival::{breslow_fit, SurvivalLabel};
use jointsurv::synth::{generate, read_truth, write_truth};
use jointsurv::trainer::random_search;

use crate::checkpoint::{Checkpoint, SplitRecord};
use crate::config::{ExperimentConfig, SeedLog};
use crate::error::{CliError, CliResult};
use crate::experiment::{
    evaluate_scored, perturbation_probe, prepare_subset, score, summarize, test_set_name, train_on,
    transfer_experiment, PerturbKind,
};
use crate::manifest::{write_atomic, write_json, ExperimentManifest, FileDigest, NamedReport, Timing};

pub const COHORT_FILE: &str = "cohort.jsonl";
pub const TRUTH_FILE: &str = "truth.json";
pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const HISTORY_FILE: &str = "history.json";
pub const REPORT_FILE: &str = "report.json";
pub const TRANSFER_FILE: &str = "transfer.txt";
pub const PERTURB_FILE: &str = "perturbation.json";
pub const SEARCH_FILE: &str = "best_config.toml";

#[derive(Debug, Parser)]
#[command(
    name = "jointsurv",
    version,
    about = "Joint survival and clinical-presence modelling"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Subcommand)]
pub enum Command {
    /// Simulate a two-regime cohort with ground truth.
    Generate(GenerateArgs),
    /// Train one strategy on a random split of a cohort.
    Train(TrainArgs),
    /// Score a checkpoint (or the true risks) on a cohort.
    Evaluate(EvaluateArgs),
    /// Train on each regime and report transfer losses.
    Transfer(TransferArgs),
    /// Measure loss sensitivity to perturbed observation processes.
    Perturb(PerturbArgs),
    /// Random hyperparameter search.
    Search(SearchArgs),
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// TOML experiment configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Master seed, overriding the configuration.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct GenerateArgs {
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum RegimeArg {
    A,
    B,
}

impl From<RegimeArg> for Regime {
    fn from(r: RegimeArg) -> Self {
        match r {
            RegimeArg::A => Regime::A,
            RegimeArg::B => Regime::B,
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub cohort: PathBuf,
    #[arg(long)]
    pub strategy: Strategy,
    /// Train on one regime only.
    #[arg(long, value_enum)]
    pub regime: Option<RegimeArg>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, ValueEnum)]
pub enum EvalSplit {
    /// The held-out test split recorded in the checkpoint.
    #[default]
    Test,
    /// Every patient of the cohort.
    All,
}

#[derive(Debug, Clone, Args)]
pub struct EvalFlags {
    /// Horizons in days, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub horizons: Option<Vec<f64>>,
    /// Bootstrap iterations.
    #[arg(long)]
    pub bootstrap: Option<usize>,
}

#[derive(Debug, Clone, Args)]
pub struct EvaluateArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long, required_unless_present = "oracle", conflicts_with = "oracle")]
    pub checkpoint: Option<PathBuf>,
    /// Score the true log-risks from a ground-truth file instead of a model.
    #[arg(long)]
    pub oracle: Option<PathBuf>,
    #[arg(long)]
    pub cohort: PathBuf,
    #[arg(long, value_enum, default_value_t)]
    pub split: EvalSplit,
    #[command(flatten)]
    pub eval: EvalFlags,
}

#[derive(Debug, Clone, Args)]
pub struct TransferArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub cohort: PathBuf,
    /// Strategies to compare; repeat the flag. Defaults to the configuration.
    #[arg(long = "strategy")]
    pub strategies: Vec<Strategy>,
    #[command(flatten)]
    pub eval: EvalFlags,
}

#[derive(Debug, Clone, Args)]
pub struct PerturbArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub cohort: PathBuf,
    /// Radii, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub radius: Option<Vec<f64>>,
    /// gap-jitter or mask-dropout.
    #[arg(long)]
    pub kind: Option<PerturbKind>,
    /// Perturbed copies per radius.
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long, value_enum, default_value_t)]
    pub split: EvalSplit,
}

#[derive(Debug, Clone, Args)]
pub struct SearchArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub cohort: PathBuf,
    #[arg(long)]
    pub strategy: Strategy,
    #[arg(long, value_enum)]
    pub regime: Option<RegimeArg>,
}

/// Run state shared by every command.
struct Run {
    config: ExperimentConfig,
    seeds: SeedLog,
    inputs: Vec<FileDigest>,
    out: PathBuf,
    timings: Vec<Timing>,
}

impl Run {
    fn start(common: &Common) -> CliResult<Self> {
        let mut inputs = Vec::new();
        let mut config = match &common.config {
            Some(p) => {
                inputs.push(FileDigest::of(p)?);
                ExperimentConfig::load(p)?
            }
            None => ExperimentConfig::default(),
        };
        if let Some(s) = common.seed {
            config.seed = s;
        }
        let seeds = SeedLog::new(config.seed);
        let existing = common.out.join(crate::manifest::MANIFEST_FILE);
        if existing.exists() {
            return Err(CliError::Usage(format!(
                "{} already exists; choose a fresh --out",
                existing.display()
            )));
        }
        std::fs::create_dir_all(&common.out).map_err(|e| CliError::io(&common.out, e))?;
        Ok(Self {
            config,
            seeds,
            inputs,
            out: common.out.clone(),
            timings: Vec::new(),
        })
    }

    fn timed<T>(&mut self, step: &str, f: impl FnOnce(&mut Self) -> CliResult<T>) -> CliResult<T> {
        let t0 = Instant::now();
        let v = f(self)?;
        self.timings.push(Timing {
            step: step.into(),
            seconds: t0.elapsed().as_secs_f64(),
        });
        Ok(v)
    }

    fn read_cohort(&mut self, path: &Path) -> CliResult<(Vec<EncounterSequence>, FileDigest)> {
        let d = FileDigest::of(path)?;
        self.inputs.push(d.clone());
        Ok((read_cohort(path)?, d))
    }

    fn eval_options(&mut self, flags: &EvalFlags) -> EvalOptions {
        let seed = self.seeds.derive(&["evaluate"]);
        if let Some(h) = &flags.horizons {
            self.config.evaluation.horizons = h.clone();
        }
        if let Some(b) = flags.bootstrap {
            self.config.evaluation.bootstrap = b;
        }
        self.config.evaluation.options(seed)
    }

    fn manifest(self, command: &str, outputs: &[&str]) -> CliResult<ExperimentManifest> {
        let mut m = ExperimentManifest::new(command, self.config, self.seeds);
        m.inputs = self.inputs;
        for name in outputs {
            m.outputs.push(FileDigest::of(&self.out.join(name))?);
        }
        m.timings = self.timings;
        Ok(m)
    }
}

fn regime_subset(cohort: Vec<EncounterSequence>, regime: Option<Regime>) -> CliResult<Vec<EncounterSequence>> {
    match regime {
        None => Ok(cohort),
        Some(r) => {
            let sub: Vec<_> = cohort.into_iter().filter(|p| p.regime == r).collect();
            if sub.is_empty() {
                return Err(jointsurv::Error::Data(format!("cohort has no regime-{r} patients")).into());
            }
            Ok(sub)
        }
    }
}

fn labels_at(cohort: &[EncounterSequence], idx: &[usize]) -> Vec<SurvivalLabel> {
    idx.iter().map(|&i| cohort[i].label).collect()
}

/// The patients a checkpoint should be scored on, plus its training split.
fn checkpoint_split(
    ck: &Checkpoint,
    cohort: Vec<EncounterSequence>,
    digest: &FileDigest,
    split: EvalSplit,
) -> CliResult<(Vec<EncounterSequence>, Vec<usize>, Option<Vec<usize>>)> {
    match split {
        EvalSplit::All => {
            let idx = (0..cohort.len()).collect();
            Ok((cohort, idx, None))
        }
        EvalSplit::Test => {
            if digest.sha256 != ck.cohort_digest {
                return Err(jointsurv::Error::Data(format!(
                    "{} is not the cohort the checkpoint was trained on; use --split all",
                    digest.name
                ))
                .into());
            }
            let sub = regime_subset(cohort, ck.split.regime)?;
            let s = split_random(&sub, ck.split.test_fraction, ck.split.val_fraction, ck.split.seed)?;
            Ok((sub, s.test, Some(s.train)))
        }
    }
}

pub fn run(command: &Command) -> CliResult<ExperimentManifest> {
    let manifest = match command {
        Command::Generate(a) => cmd_generate(a)?,
        Command::Train(a) => cmd_train(a)?,
        Command::Evaluate(a) => cmd_evaluate(a)?,
        Command::Transfer(a) => cmd_transfer(a)?,
        Command::Perturb(a) => cmd_perturb(a)?,
        Command::Search(a) => cmd_search(a)?,
    };
    let out = match command {
        Command::Generate(a) => &a.common.out,
        Command::Train(a) => &a.common.out,
        Command::Evaluate(a) => &a.common.out,
        Command::Transfer(a) => &a.common.out,
        Command::Perturb(a) => &a.common.out,
        Command::Search(a) => &a.common.out,
    };
    manifest.write(out)?;
    Ok(manifest)
}

pub fn cmd_generate(a: &GenerateArgs) -> CliResult<ExperimentManifest> {
    let mut run = Run::start(&a.common)?;
    run.config.generator.seed = run.seeds.derive(&["generate"]);
    let (cohort, truth) = run.timed("generate", |r| Ok(generate(&r.config.generator)?))?;
    write_cohort(&run.out.join(COHORT_FILE), &cohort)?;
    write_truth(&run.out.join(TRUTH_FILE), &truth)?;
    let summary = summarize(&cohort);
    for r in &summary.regimes {
        println!(
            "regime {}: {} patients, {:.2} encounters, mean gap {:.3} h, {:.1}% observed, event rate {:.3}",
            r.regime,
            r.n_patients,
            r.mean_encounters,
            r.mean_gap_hours,
            100.0 * r.observed_fraction,
            r.event_rate
        );
    }
    let mut m = run.manifest("generate", &[COHORT_FILE, TRUTH_FILE])?;
    for d in &m.outputs {
        println!("{}  {}", d.sha256, d.name);
    }
    m.cohort_summary = Some(summary);
    Ok(m)
}

pub fn cmd_train(a: &TrainArgs) -> CliResult<ExperimentManifest> {
    let mut run = Run::start(&a.common)?;
    let (cohort, digest) = run.read_cohort(&a.cohort)?;
    let regime = a.regime.map(Regime::from);
    let cohort = regime_subset(cohort, regime)?;
    let split = SplitRecord {
        seed: run.seeds.derive(&["split"]),
        test_fraction: run.config.split.test_fraction,
        val_fraction: run.config.split.val_fraction,
        regime,
    };
    let splits = split_random(&cohort, split.test_fraction, split.val_fraction, split.seed)?;
    run.config.train.seed = run.seeds.derive(&["train"]);
    let cfg = run.config.train.clone();
    let (model, history) = run.timed("train", |_| Ok(train_on(&cohort, &splits, a.strategy, &cfg)?))?;
    if let Some((_, best)) = history.best.first() {
        println!(
            "{}: {} epochs, best validation loss {best:.6}",
            a.strategy,
            history.epochs.len()
        );
    }
    Checkpoint::new(model, cfg, split, digest.sha256).save(&run.out.join(CHECKPOINT_FILE))?;
    write_json(&run.out.join(HISTORY_FILE), &history)?;
    run.manifest("train", &[CHECKPOINT_FILE, HISTORY_FILE])
}

fn print_report(model: &str, r: &EvaluationReport) {
    for h in &r.horizons {
        println!(
            "{model}  {:>5} d  C-index {:.4} ± {:.4}  Brier {:.4} ± {:.4}",
            h.horizon_days, h.cindex.mean, h.cindex.std, h.brier.mean, h.brier.std
        );
    }
    println!(
        "{model}  integrated C-index {:.4} ± {:.4} (full set {:.4}, n = {})",
        r.integrated_cindex.mean,
        r.integrated_cindex.std,
        r.point_integrated(),
        r.n_patients
    );
}

pub fn cmd_evaluate(a: &EvaluateArgs) -> CliResult<ExperimentManifest> {
    let mut run = Run::start(&a.common)?;
    let opts = run.eval_options(&a.eval);
    let (cohort, digest) = run.read_cohort(&a.cohort)?;
    let (name, report) = match (&a.checkpoint, &a.oracle) {
        (Some(path), _) => {
            run.inputs.push(FileDigest::of(path)?);
            let ck = Checkpoint::load(path)?;
            let (cohort, test, train) = checkpoint_split(&ck, cohort, &digest, a.split)?;
            let scored = score(&ck.model, &cohort, &test)?;
            let train_labels = train.map(|t| labels_at(&cohort, &t));
            let tag = test_set_name(&format!("{:?}", a.split).to_lowercase(), &cohort, &test);
            let report = run.timed("evaluate", |_| {
                Ok(evaluate_scored(
                    &scored,
                    ck.model.breslow()?,
                    train_labels.as_deref(),
                    &opts,
                    &tag,
                )?)
            })?;
            (ck.model.strategy.to_string(), report)
        }
        (None, Some(path)) => {
            run.inputs.push(FileDigest::of(path)?);
            let truth = read_truth(path)?;
            let risk: HashMap<&str, f64> = truth.patients.iter().map(|p| (p.patient_id.as_str(), p.risk)).collect();
            let eta = cohort
                .iter()
                .map(|p| {
                    risk.get(p.patient_id.as_str())
                        .copied()
                        .ok_or_else(|| jointsurv::Error::Data(format!("{} has no ground-truth risk", p.patient_id)))
                })
                .collect::<Result<Vec<f64>, _>>()?;
            let labels: Vec<SurvivalLabel> = cohort.iter().map(|p| p.label).collect();
            let table = breslow_fit(&eta, &labels)?;
            let pred = CoxPredictions {
                eta: &eta,
                table: &table,
            };
            let idx: Vec<usize> = (0..cohort.len()).collect();
            let tag = test_set_name("all", &cohort, &idx);
            let report = run.timed("evaluate", |_| {
                Ok(evaluate(&|i, t| pred.survival(i, t), &labels, None, &opts, &tag)?)
            })?;
            ("oracle".to_string(), report)
        }
        (None, None) => return Err(CliError::Usage("evaluate needs --checkpoint or --oracle".into())),
    };
    print_report(&name, &report);
    write_json(&run.out.join(REPORT_FILE), &report)?;
    let mut m = run.manifest("evaluate", &[REPORT_FILE])?;
    m.reports.push(NamedReport { model: name, report });
    Ok(m)
}

pub fn cmd_transfer(a: &TransferArgs) -> CliResult<ExperimentManifest> {
    let mut run = Run::start(&a.common)?;
    let opts = run.eval_options(&a.eval);
    if !a.strategies.is_empty() {
        run.config.transfer.strategies = a.strategies.clone();
    }
    let (cohort, _) = run.read_cohort(&a.cohort)?;
    let split_seed = run.seeds.derive(&["regime-split"]);
    run.config.train.seed = run.seeds.derive(&["train"]);
    let cfg = run.config.clone();
    let result = run.timed("transfer", |_| {
        Ok(transfer_experiment(
            &cohort,
            &cfg.transfer.strategies,
            &cfg.train,
            cfg.split.test_fraction,
            cfg.split.val_fraction,
            split_seed,
            &opts,
        )?)
    })?;
    let text = result.table.render();
    print!("{text}");
    write_atomic(&run.out.join(TRANSFER_FILE), text.as_bytes())?;
    let mut m = run.manifest("transfer", &[TRANSFER_FILE])?;
    m.reports = result.reports;
    m.transfer = Some(result.table);
    Ok(m)
}

pub fn cmd_perturb(a: &PerturbArgs) -> CliResult<ExperimentManifest> {
    let mut run = Run::start(&a.common)?;
    if let Some(r) = &a.radius {
        run.config.perturb.radii = r.clone();
    }
    if let Some(k) = a.kind {
        run.config.perturb.kind = k;
    }
    if let Some(n) = a.n {
        run.config.perturb.n_perturbations = n;
    }
    let seed = run.seeds.derive(&["perturb"]);
    let (cohort, digest) = run.read_cohort(&a.cohort)?;
    run.inputs.push(FileDigest::of(&a.checkpoint)?);
    let ck = Checkpoint::load(&a.checkpoint)?;
    let (cohort, test, _) = checkpoint_split(&ck, cohort, &digest, a.split)?;
    let test = Splits::select(&cohort, &test);
    let p = run.config.perturb.clone();
    let report = run.timed("perturb", |_| {
        Ok(perturbation_probe(
            &ck.model,
            &ck.train_config,
            &test,
            p.kind,
            &p.radii,
            p.n_perturbations,
            seed,
        )?)
    })?;
    for row in &report.rows {
        println!(
            "{} r = {}: survival {:.6}  temporal {}  missingness {}  combined {:.6}",
            row.kind.tag(),
            row.radius,
            row.survival,
            row.temporal.map_or("-".into(), |v| format!("{v:.6}")),
            row.missingness.map_or("-".into(), |v| format!("{v:.6}")),
            row.combined
        );
    }
    write_json(&run.out.join(PERTURB_FILE), &report)?;
    let mut m = run.manifest("perturb", &[PERTURB_FILE])?;
    m.perturbation = Some(report);
    Ok(m)
}

pub fn cmd_search(a: &SearchArgs) -> CliResult<ExperimentManifest> {
    let mut run = Run::start(&a.common)?;
    let (cohort, _) = run.read_cohort(&a.cohort)?;
    let cohort = regime_subset(cohort, a.regime.map(Regime::from))?;
    let splits = split_random(
        &cohort,
        run.config.split.test_fraction,
        run.config.split.val_fraction,
        run.seeds.derive(&["split"]),
    )?;
    run.config.train.seed = run.seeds.derive(&["train"]);
    let search_seed = run.seeds.derive(&["search"]);
    let cfg = run.config.clone();
    let stats = jointsurv::data::NormStats::fit(
        &Splits::select(&cohort, &splits.train),
        jointsurv::data::SplitRole::Train,
    )?;
    let train = prepare_subset(&cohort, &splits.train, a.strategy, &stats)?;
    let val = prepare_subset(&cohort, &splits.val, a.strategy, &stats)?;
    let result = run.timed("search", |_| {
        Ok(random_search(
            &cfg.search,
            &cfg.train,
            &train,
            &val,
            cfg.train.search_draws,
            search_seed,
        )?)
    })?;
    for (rank, e) in result.leaderboard.iter().enumerate() {
        println!(
            "#{:<3} grid point {:<5} validation C-index {:.4}",
            rank + 1,
            e.grid_index,
            e.val_cindex
        );
    }
    // Seeds are re-derived from the master seed on every run.
    let mut best = ExperimentConfig {
        train: result.best.clone(),
        ..cfg
    };
    best.train.seed = 0;
    best.generator.seed = 0;
    write_atomic(&run.out.join(SEARCH_FILE), best.to_toml().as_bytes())?;
    let mut m = run.manifest("search", &[SEARCH_FILE])?;
    m.search = Some(result);
    Ok(m)
}
