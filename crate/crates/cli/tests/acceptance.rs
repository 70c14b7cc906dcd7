//! Acceptance criteria, one pass/fail line each.
//!
//! Run all with `cargo test --test acceptance`, or a subset with
//! `cargo test --test acceptance -- 1 3 10`. Criteria 8 and 9 are directional
//! and reported without failing the run.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use jointsurv::autodiff::{adam_step, AdError, AdamConfig, AdamState, Graph, NodeId, ParamStore, Tensor};
use jointsurv::data::{read_cohort, split_random, EncounterSequence, Regime, Splits, Strategy};
use jointsurv::gradcheck::{check_gradients, rel_error};
use jointsurv::metrics::{brier, cindex_integrated, cindex_td, cindex_td_weighted, CensoringKm, EvalOptions};
use jointsurv::nn::{
    encode_sequence, Activation, CellKind, DecayInputs, Encoder, Mlp, MlpConfig, PositiveMlp, PositiveMlpConfig,
    RecurrentConfig, SequenceInput,
};
use jointsurv::presence::{
    bce_terms, censored_terms, cumulative_intensity, intensity_and_density, interval_nll, patient_mean_weights,
    weighted_sum,
};
use jointsurv::seed;
use jointsurv::survival::{breslow_fit, cox_loss, cox_partial_loglik, SurvivalLabel};
use jointsurv::synth::{generate, GeneratorConfig};
use jointsurv::trainer::{JointModel, TrainConfig};
use jointsurv::Error;
use jointsurv_cli::checkpoint::Checkpoint;
use jointsurv_cli::commands::{
    run, Command, Common, EvalFlags, EvalSplit, EvaluateArgs, GenerateArgs, PerturbArgs, SearchArgs, TrainArgs,
    TransferArgs, CHECKPOINT_FILE, COHORT_FILE, TRUTH_FILE,
};
use jointsurv_cli::experiment::{
    median, perturbation_probe, prepare_subset, train_on, transfer_experiment, PerturbKind, TransferTable,
};
use jointsurv_cli::manifest::{ExperimentManifest, MANIFEST_FILE};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const STEP: f64 = 1e-5;
const GRAD_TOL: f64 = 1e-4;
const SEEDS_PER_COMPONENT: u64 = 100;
const EXACT_TOL: f64 = 1e-12;

struct Outcome {
    pass: bool,
    detail: String,
}

impl Outcome {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Self {
            pass,
            detail: detail.into(),
        }
    }
}

struct Criterion {
    id: u32,
    name: &'static str,
    gating: bool,
    run: fn() -> Outcome,
}

fn main() -> ExitCode {
    let criteria = [
        Criterion {
            id: 1,
            name: "gradient suite",
            gating: true,
            run: gradient_suite,
        },
        Criterion {
            id: 2,
            name: "monotone presence head",
            gating: true,
            run: monotone_head,
        },
        Criterion {
            id: 3,
            name: "Cox oracle",
            gating: true,
            run: cox_oracle,
        },
        Criterion {
            id: 4,
            name: "metric oracles",
            gating: true,
            run: metric_oracles,
        },
        Criterion {
            id: 5,
            name: "exponential recovery",
            gating: true,
            run: exponential_recovery,
        },
        Criterion {
            id: 6,
            name: "degenerate-config equivalence",
            gating: true,
            run: degenerate_equivalence,
        },
        Criterion {
            id: 7,
            name: "no-shift null",
            gating: true,
            run: no_shift_null,
        },
        Criterion {
            id: 8,
            name: "shift experiment",
            gating: false,
            run: shift_experiment,
        },
        Criterion {
            id: 9,
            name: "perturbation probe",
            gating: false,
            run: perturbation_trend,
        },
        Criterion {
            id: 10,
            name: "reproducibility",
            gating: true,
            run: reproducibility,
        },
    ];
    let wanted: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut lines = Vec::new();
    let mut failed = false;
    for c in criteria.iter().filter(|c| wanted.is_empty() || wanted.contains(&c.id)) {
        let start = Instant::now();
        let out = (c.run)();
        let secs = start.elapsed().as_secs_f64();
        let verdict = if out.pass { "PASS" } else { "FAIL" };
        let kind = if c.gating { "" } else { " (directional, not gating)" };
        let line = format!(
            "criterion {:>2} {verdict}{kind} [{}] {} ({secs:.1} s)",
            c.id, c.name, out.detail
        );
        println!("{line}");
        lines.push(line);
        failed |= c.gating && !out.pass;
    }
    println!("\nacceptance summary");
    for l in &lines {
        println!("{l}");
    }
    if failed {
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}

fn ad(e: Error) -> AdError {
    match e {
        Error::Ad(a) => a,
        other => AdError::Contract(other.to_string()),
    }
}

fn matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, lo: f64, hi: f64) -> Tensor {
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// A smooth non-linear scalar of every entry, so no gradient is trivially one.
fn reduce(g: &mut Graph, x: NodeId) -> Result<NodeId, AdError> {
    let sq = g.square(x)?;
    let t = g.tanh(x)?;
    let s = g.add(sq, t)?;
    g.sum(s)
}

fn widths(rng: &mut ChaCha8Rng) -> Vec<usize> {
    (0..rng.random_range(1..=2)).map(|_| rng.random_range(2..=4)).collect()
}

fn smooth_activation(rng: &mut ChaCha8Rng) -> Activation {
    if rng.random_bool(0.5) {
        Activation::Tanh
    } else {
        Activation::Softplus
    }
}

/// `h = tanh(x W)` with `W` trainable, so checks reach through the embedding.
fn embedding(rng: &mut ChaCha8Rng, store: &mut ParamStore, n: usize, d: usize) -> Tensor {
    store.insert_uniform("emb.w", &[3, d], 0.8, rng).unwrap();
    matrix(rng, n, 3, -1.5, 1.5)
}

fn embed(g: &mut Graph, s: &ParamStore, x: &Tensor) -> Result<NodeId, AdError> {
    let xn = g.constant(x.clone());
    let w = g.param(s, "emb.w")?;
    let z = g.matmul(xn, w)?;
    g.tanh(z)
}

fn positive_head(rng: &mut ChaCha8Rng, store: &mut ParamStore, d: usize) -> PositiveMlp {
    let act = smooth_activation(rng);
    let net = PositiveMlp::new(
        "i",
        PositiveMlpConfig {
            embedding_dim: d,
            hidden_layers: widths(rng),
            activation: act,
        },
    )
    .unwrap();
    net.init(store, rng).unwrap();
    net
}

fn gaps(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(0.05..6.0)).collect()
}

fn tied_labels(rng: &mut ChaCha8Rng, n: usize, max_time: u32) -> Vec<SurvivalLabel> {
    loop {
        let labels: Vec<SurvivalLabel> = (0..n)
            .map(|_| SurvivalLabel::new(f64::from(rng.random_range(1..=max_time)), rng.random_bool(0.6)).unwrap())
            .collect();
        if labels.iter().any(|l| l.event) {
            return labels;
        }
    }
}

fn check_mlp(act: Activation, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cfg = MlpConfig::new(3, widths(&mut rng), 2);
    cfg.activation = act;
    let net = Mlp::new("m", cfg);
    let mut store = ParamStore::new();
    net.init(&mut store, &mut rng).unwrap();
    let x = matrix(&mut rng, 4, 3, -2.0, 2.0);
    check_gradients(&store, STEP, |g, s| {
        let xn = g.constant(x.clone());
        let y = net.forward(g, s, xn)?;
        reduce(g, y)
    })
    .unwrap()
    .max_rel_error
}

fn random_sequence(rng: &mut ChaCha8Rng, cell: CellKind, k: usize, len: usize) -> SequenceInput {
    let x = (0..len)
        .map(|_| (0..k).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect();
    let decay = (cell == CellKind::GruD).then(|| DecayInputs {
        mask: (0..len)
            .map(|_| (0..k).map(|_| f64::from(u8::from(rng.random_bool(0.6)))).collect())
            .collect(),
        delta: (0..len)
            .map(|_| (0..k).map(|_| rng.random_range(0.1..3.0)).collect())
            .collect(),
        x_last: (0..len)
            .map(|_| (0..k).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect(),
    });
    SequenceInput { x, decay }
}

fn check_encoder(cell: CellKind, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = 2;
    let layers = rng.random_range(1..=2);
    let mut enc = Encoder::new(
        "e",
        RecurrentConfig {
            cell,
            input_dim: k,
            hidden_dim: 3,
            num_layers: layers,
        },
    )
    .unwrap();
    if cell == CellKind::GruD {
        enc.empirical_means = vec![0.1, -0.2];
    }
    let mut store = ParamStore::new();
    enc.init(&mut store, &mut rng).unwrap();
    if cell == CellKind::GruD {
        // Positive decay weights with positive gaps keep the relu off its kink.
        for id in ["e.decay.x_w", "e.decay.x_b", "e.decay.h_w", "e.decay.h_b"] {
            for v in store.tensor_mut(id).unwrap().data_mut() {
                *v = rng.random_range(0.2..0.8);
            }
        }
    }
    let a = random_sequence(&mut rng, cell, k, 3);
    let b = random_sequence(&mut rng, cell, k, 2);
    check_gradients(&store, STEP, |g, s| {
        let out = enc.encode_batch(g, s, &[&a, &b])?;
        reduce(g, out.states)
    })
    .unwrap()
    .max_rel_error
}

fn check_positive(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (n, d) = (4, 3);
    let mut store = ParamStore::new();
    let x = embedding(&mut rng, &mut store, n, d);
    let net = positive_head(&mut rng, &mut store, d);
    let eps = gaps(&mut rng, n);
    check_gradients(&store, STEP, |g, s| {
        let h = embed(g, s, &x)?;
        let en = g.constant(Tensor::matrix(n, 1, eps.clone())?);
        let lam = net.forward(g, s, h, en)?;
        reduce(g, lam)
    })
    .unwrap()
    .max_rel_error
}

fn check_interval_nll(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (n, d) = (5, 3);
    let mut store = ParamStore::new();
    let x = embedding(&mut rng, &mut store, n, d);
    let net = positive_head(&mut rng, &mut store, d);
    let eps = gaps(&mut rng, n);
    let weights = patient_mean_weights(&[2, 3]);
    check_gradients(&store, STEP, |g, s| {
        let h = embed(g, s, &x)?;
        let (terms, _) = interval_nll(g, &net, s, h, &eps).map_err(ad)?;
        weighted_sum(g, terms, &weights).map_err(ad)
    })
    .unwrap()
    .max_rel_error
}

fn check_censored(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (n, d) = (3, 3);
    let mut store = ParamStore::new();
    let x = embedding(&mut rng, &mut store, n, d);
    let net = positive_head(&mut rng, &mut store, d);
    let eps = gaps(&mut rng, n);
    check_gradients(&store, STEP, |g, s| {
        let h = embed(g, s, &x)?;
        let terms = censored_terms(g, &net, s, h, &eps).map_err(ad)?;
        weighted_sum(g, terms, &[0.5, 0.25, 0.25]).map_err(ad)
    })
    .unwrap()
    .max_rel_error
}

fn missingness_head(rng: &mut ChaCha8Rng, store: &mut ParamStore, d: usize, k: usize) -> Mlp {
    let mut cfg = MlpConfig::new(d + 1, widths(rng), k);
    cfg.activation = smooth_activation(rng);
    let net = Mlp::new("m", cfg);
    net.init(store, rng).unwrap();
    net
}

fn masks(rng: &mut ChaCha8Rng, n: usize, k: usize) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| (0..k).map(|_| f64::from(u8::from(rng.random_bool(0.5)))).collect())
        .collect()
}

fn check_bce(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (n, d, k) = (4, 3, 3);
    let mut store = ParamStore::new();
    let x = embedding(&mut rng, &mut store, n, d);
    let net = missingness_head(&mut rng, &mut store, d, k);
    let eps = gaps(&mut rng, n);
    let m = masks(&mut rng, n, k);
    check_gradients(&store, STEP, |g, s| {
        let h = embed(g, s, &x)?;
        let terms = bce_terms(g, &net, s, h, &eps, &m).map_err(ad)?;
        g.sum(terms)
    })
    .unwrap()
    .max_rel_error
}

fn check_cox(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(2..=10);
    let labels = tied_labels(&mut rng, n, 4);
    let mut store = ParamStore::new();
    store.insert_uniform("w", &[3, 1], 1.0, &mut rng).unwrap();
    let x = matrix(&mut rng, n, 3, -1.5, 1.5);
    check_gradients(&store, STEP, |g, s| {
        let xn = g.constant(x.clone());
        let w = g.param(s, "w")?;
        let eta = g.matmul(xn, w)?;
        cox_loss(g, eta, &labels).map_err(ad)
    })
    .unwrap()
    .max_rel_error
}

/// Survival, temporal and missingness losses sharing one embedding.
fn check_combined(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (n, d, k) = (5, 3, 2);
    let mut store = ParamStore::new();
    let x = embedding(&mut rng, &mut store, n, d);
    let temporal = positive_head(&mut rng, &mut store, d);
    let missing = missingness_head(&mut rng, &mut store, d, k);
    let mut surv_cfg = MlpConfig::new(d, vec![3], 1);
    surv_cfg.activation = Activation::Tanh;
    let surv = Mlp::new("s", surv_cfg);
    surv.init(&mut store, &mut rng).unwrap();
    let labels = tied_labels(&mut rng, n, 3);
    let eps = gaps(&mut rng, n);
    let m = masks(&mut rng, n, k);
    let weights = patient_mean_weights(&[n]);
    let (alpha, w_i, w_m) = (0.3, rng.random_range(0.2..1.8), rng.random_range(0.2..1.8));
    check_gradients(&store, STEP, |g, s| {
        let h = embed(g, s, &x)?;
        let eta = surv.forward(g, s, h)?;
        let l_s = cox_loss(g, eta, &labels).map_err(ad)?;
        let (ti, _) = interval_nll(g, &temporal, s, h, &eps).map_err(ad)?;
        let l_i = weighted_sum(g, ti, &weights).map_err(ad)?;
        let tm = bce_terms(g, &missing, s, h, &eps, &m).map_err(ad)?;
        let l_m = weighted_sum(g, tm, &weights).map_err(ad)?;
        let a = g.scale(l_s, 1.0 - alpha)?;
        let b = g.scale(l_i, alpha * w_i)?;
        let c = g.scale(l_m, alpha * w_m)?;
        let ab = g.add(a, b)?;
        g.add(ab, c)
    })
    .unwrap()
    .max_rel_error
}

fn gradient_suite() -> Outcome {
    let components: Vec<(&str, Box<dyn Fn(u64) -> f64>)> = vec![
        ("mlp softplus", Box::new(|s| check_mlp(Activation::Softplus, s))),
        ("mlp tanh", Box::new(|s| check_mlp(Activation::Tanh, s))),
        ("mlp sigmoid", Box::new(|s| check_mlp(Activation::Sigmoid, s))),
        ("mlp relu", Box::new(|s| check_mlp(Activation::Relu, s))),
        ("lstm", Box::new(|s| check_encoder(CellKind::Lstm, s))),
        ("gru", Box::new(|s| check_encoder(CellKind::Gru, s))),
        ("gru-d", Box::new(|s| check_encoder(CellKind::GruD, s))),
        ("monotone head", Box::new(check_positive)),
        ("interval nll", Box::new(check_interval_nll)),
        ("censored tail", Box::new(check_censored)),
        ("missingness bce", Box::new(check_bce)),
        ("cox loss", Box::new(check_cox)),
        ("combined loss", Box::new(check_combined)),
    ];
    let start = Instant::now();
    let mut worst = (0.0, "", 0);
    let mut failures = Vec::new();
    for (name, check) in &components {
        for seed in 0..SEEDS_PER_COMPONENT {
            let err = check(seed);
            if err > worst.0 || err.is_nan() {
                worst = (err, name, seed);
            }
            if !(err <= GRAD_TOL) {
                failures.push(format!("{name} seed {seed}: {err:.2e}"));
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let detail =
        format!(
        "{} components x {SEEDS_PER_COMPONENT} seeds, worst rel error {:.2e} ({} seed {}), tolerance {GRAD_TOL:e}, \
         {secs:.1} s of 120 s budget{}",
        components.len(),
        worst.0,
        worst.1,
        worst.2,
        if failures.is_empty() { String::new() } else { format!("; failures: {}", failures.join(", ")) }
    );
    Outcome::new(failures.is_empty() && secs < 120.0, detail)
}

fn monotone_head() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (mut violations, mut worst_zero) = (0, 0.0_f64);
    for _ in 0..10_000 {
        let d = rng.random_range(1..=4);
        let mut store = ParamStore::new();
        let net = positive_head(&mut rng, &mut store, d);
        // Wider weights than the initialiser explores saturating regions.
        let gain = rng.random_range(0.5..4.0);
        let ids: Vec<String> = store.iter().map(|p| p.id.clone()).collect();
        for id in ids {
            for v in store.tensor_mut(&id).unwrap().data_mut() {
                *v *= gain;
            }
        }
        let h = Tensor::vector((0..d).map(|_| rng.random_range(-3.0..3.0)).collect());
        let e1 = rng.random_range(0.0..48.0);
        let e2 = rng.random_range(e1..=48.0);
        let l1 = cumulative_intensity(&net, &store, &h, e1).unwrap();
        let l2 = cumulative_intensity(&net, &store, &h, e2).unwrap();
        let l0 = cumulative_intensity(&net, &store, &h, 0.0).unwrap();
        if l1 > l2 + EXACT_TOL {
            violations += 1;
        }
        worst_zero = worst_zero.max(l0.abs());
    }
    let mut worst_grad = 0.0_f64;
    let mut worst_density = 0.0_f64;
    for seed in 0..SEEDS_PER_COMPONENT {
        worst_grad = worst_grad.max(check_interval_nll(1000 + seed));
        let mut rng = ChaCha8Rng::seed_from_u64(2000 + seed);
        let mut store = ParamStore::new();
        let net = positive_head(&mut rng, &mut store, 3);
        let h = Tensor::vector((0..3).map(|_| rng.random_range(-2.0..2.0)).collect());
        let e = rng.random_range(0.05..6.0);
        let (_, dens) = intensity_and_density(&net, &store, &h, e).unwrap();
        let up = cumulative_intensity(&net, &store, &h, e + STEP).unwrap();
        let dn = cumulative_intensity(&net, &store, &h, e - STEP).unwrap();
        worst_density = worst_density.max(rel_error(dens, (up - dn) / (2.0 * STEP)));
    }
    let pass = violations == 0 && worst_zero <= EXACT_TOL && worst_grad <= GRAD_TOL && worst_density <= GRAD_TOL;
    Outcome::new(
        pass,
        format!(
            "10000 triples, {violations} order violations, max |Λ(h,0)| {worst_zero:.1e}; nested l_I gradient worst rel \
             error {worst_grad:.2e}, density vs finite difference {worst_density:.2e}"
        ),
    )
}

/// Mean over events of `η_i − log Σ_{t_j ≥ t_i} exp η_j`, summed pair by pair.
fn brute_loglik(eta: &[f64], labels: &[SurvivalLabel]) -> f64 {
    let mut total = 0.0;
    let mut events = 0;
    for i in 0..labels.len() {
        if !labels[i].event {
            continue;
        }
        let mut denom = 0.0;
        for j in 0..labels.len() {
            if labels[j].time >= labels[i].time {
                denom += eta[j].exp();
            }
        }
        total += eta[i] - denom.ln();
        events += 1;
    }
    total / f64::from(events)
}

/// Each event adds `1 / Σ_{t_j ≥ t_k} exp η_j` to every later time.
fn brute_baseline(eta: &[f64], labels: &[SurvivalLabel], t: f64) -> f64 {
    let mut cum = 0.0;
    for k in 0..labels.len() {
        if !labels[k].event || labels[k].time > t {
            continue;
        }
        let mut denom = 0.0;
        for j in 0..labels.len() {
            if labels[j].time >= labels[k].time {
                denom += eta[j].exp();
            }
        }
        cum += 1.0 / denom;
    }
    cum
}

fn cox_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst = 0.0_f64;
    let mut tied = 0;
    for _ in 0..50 {
        let n = rng.random_range(1..=10);
        let labels = tied_labels(&mut rng, n, 5);
        let eta: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
        let mut event_times: Vec<f64> = labels.iter().filter(|l| l.event).map(|l| l.time).collect();
        let n_events = event_times.len();
        event_times.sort_by(f64::total_cmp);
        event_times.dedup();
        if event_times.len() < n_events {
            tied += 1;
        }
        let expected = brute_loglik(&eta, &labels);
        worst = worst.max((cox_partial_loglik(&eta, &labels).unwrap() - expected).abs());
        let mut g = Graph::new();
        let en = g.constant(Tensor::matrix(n, 1, eta.clone()).unwrap());
        let loss = cox_loss(&mut g, en, &labels).unwrap();
        worst = worst.max((g.scalar(loss) + expected).abs());

        let table = breslow_fit(&eta, &labels).unwrap();
        if table.event_times != event_times {
            return Outcome::new(false, format!("event times {:?} vs {event_times:?}", table.event_times));
        }
        for t in [0.0, 0.5, 1.0, 1.5, 2.0, 2.5, 3.0, 3.5, 4.0, 4.5, 5.0, 6.0] {
            worst = worst.max((table.cumulative_at(t) - brute_baseline(&eta, &labels, t)).abs());
        }
    }
    Outcome::new(
        worst <= EXACT_TOL,
        format!("50 cohorts ({tied} with tied events), max deviation {worst:.1e}, tolerance {EXACT_TOL:e}"),
    )
}

/// Product-limit censoring survival from the raw labels; `strict` gives `G(t−)`.
fn brute_censoring(labels: &[SurvivalLabel], t: f64, strict: bool) -> f64 {
    let mut g = 1.0;
    let mut seen: Vec<f64> = Vec::new();
    for l in labels {
        let u = l.time;
        let included = if strict { u < t } else { u <= t };
        if l.event || !included || seen.contains(&u) {
            continue;
        }
        seen.push(u);
        let censored = labels.iter().filter(|m| !m.event && m.time == u).count() as f64;
        let at_risk = labels.iter().filter(|m| m.time >= u).count() as f64;
        g *= 1.0 - censored / at_risk;
    }
    g
}

fn score(a: f64, b: f64) -> f64 {
    if a > b {
        1.0
    } else if a == b {
        0.5
    } else {
        0.0
    }
}

/// Weighted concordance over every ordered pair; `None` without comparable pairs.
fn brute_concordance(
    labels: &[SurvivalLabel],
    horizon: f64,
    weight: impl Fn(usize) -> f64,
    pair: impl Fn(usize, usize) -> f64,
) -> Option<f64> {
    let (mut num, mut den) = (0.0, 0.0);
    for i in 0..labels.len() {
        for j in 0..labels.len() {
            if i != j && labels[i].event && labels[i].time <= horizon && labels[i].time < labels[j].time {
                num += weight(i) * pair(i, j);
                den += weight(i);
            }
        }
    }
    (den > 0.0).then(|| num / den)
}

fn brute_brier(labels: &[SurvivalLabel], surv: impl Fn(usize, f64) -> f64, horizon: f64) -> Option<f64> {
    let g_h = brute_censoring(labels, horizon, false);
    let mut total = 0.0;
    for (i, l) in labels.iter().enumerate() {
        let s = surv(i, horizon);
        if l.event && l.time <= horizon {
            let g = brute_censoring(labels, l.time, true);
            if g == 0.0 {
                return None;
            }
            total += s * s / g;
        } else if l.time > horizon {
            if g_h == 0.0 {
                return None;
            }
            total += (1.0 - s) * (1.0 - s) / g_h;
        }
    }
    Some(total / labels.len() as f64)
}

fn compare(worst: &mut f64, got: jointsurv::Result<f64>, want: Option<f64>) -> Result<(), String> {
    match (got, want) {
        (Ok(a), Some(b)) => {
            *worst = worst.max((a - b).abs());
            Ok(())
        }
        (Err(_), None) => Ok(()),
        (got, want) => Err(format!("metric {got:?} but enumeration {want:?}")),
    }
}

fn metric_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst = 0.0_f64;
    for _ in 0..50 {
        let n = rng.random_range(2..=8);
        let labels = tied_labels(&mut rng, n, 6);
        let risk: Vec<f64> = (0..n).map(|_| f64::from(rng.random_range(-2..=2))).collect();
        let rate: Vec<f64> = (0..n).map(|_| f64::from(rng.random_range(1..=3)) * 0.1).collect();
        let surv = |i: usize, t: f64| (-rate[i] * t).exp();
        let horizon = f64::from(rng.random_range(2..=6));
        let km = CensoringKm::fit(&labels);
        let checks = [
            compare(
                &mut worst,
                cindex_td(&risk, &labels, horizon),
                brute_concordance(&labels, horizon, |_| 1.0, |i, j| score(risk[i], risk[j])),
            ),
            compare(
                &mut worst,
                cindex_td_weighted(&risk, &labels, horizon, Some(&km)),
                if labels
                    .iter()
                    .any(|l| l.event && l.time <= horizon && brute_censoring(&labels, l.time, true) == 0.0)
                {
                    None
                } else {
                    brute_concordance(
                        &labels,
                        horizon,
                        |i| brute_censoring(&labels, labels[i].time, true).powi(-2),
                        |i, j| score(risk[i], risk[j]),
                    )
                },
            ),
            compare(
                &mut worst,
                cindex_integrated(surv, &labels, horizon),
                brute_concordance(
                    &labels,
                    horizon,
                    |_| 1.0,
                    |i, j| score(1.0 - surv(i, labels[i].time), 1.0 - surv(j, labels[i].time)),
                ),
            ),
            compare(
                &mut worst,
                brier(surv, &labels, horizon, &km, None),
                brute_brier(&labels, surv, horizon),
            ),
        ];
        if let Some(Err(e)) = checks.into_iter().find(Result::is_err) {
            return Outcome::new(false, e);
        }
    }

    let labels: Vec<SurvivalLabel> = (1..=8)
        .map(|t| SurvivalLabel::new(f64::from(t), true).unwrap())
        .collect();
    let ranked: Vec<f64> = labels.iter().map(|l| -l.time).collect();
    let ranked_surv = |i: usize, t: f64| (-(9.0 - labels[i].time) * 0.1 * t).exp();
    let perfect = [
        cindex_td(&ranked, &labels, 8.0).unwrap(),
        cindex_integrated(ranked_surv, &labels, 8.0).unwrap(),
    ];
    let ties = [
        cindex_td(&[0.3; 8], &labels, 8.0).unwrap(),
        cindex_integrated(|_, t| (-0.2 * t).exp(), &labels, 8.0).unwrap(),
    ];
    let pass = worst <= EXACT_TOL && perfect == [1.0, 1.0] && ties == [0.5, 0.5];
    Outcome::new(
        pass,
        format!(
            "50 cohorts, max deviation {worst:.1e}, tolerance {EXACT_TOL:e}; perfect ranking {perfect:?}, all ties {ties:?}"
        ),
    )
}

fn exponential_recovery() -> Outcome {
    const RATE: f64 = 0.5;
    const N: usize = 2000;
    const STEPS: usize = 1500;
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let d = 4;
    let net = PositiveMlp::new(
        "i",
        PositiveMlpConfig {
            embedding_dim: d,
            hidden_layers: vec![50],
            activation: Activation::Tanh,
        },
    )
    .unwrap();
    let mut store = ParamStore::new();
    net.init(&mut store, &mut rng).unwrap();
    let h0: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
    let h = Tensor::matrix(N, d, h0.repeat(N)).unwrap();
    let gaps: Vec<f64> = (0..N).map(|_| -(1.0 - rng.random::<f64>()).ln() / RATE).collect();
    let adam = AdamConfig::with_lr(1e-2);
    let mut state = AdamState::new();
    let mut last = f64::NAN;
    for _ in 0..STEPS {
        let mut g = Graph::new();
        let hn = g.constant(h.clone());
        let (terms, _) = interval_nll(&mut g, &net, &store, hn, &gaps).unwrap();
        let total = g.sum(terms).unwrap();
        let loss = g.scale(total, 1.0 / N as f64).unwrap();
        last = g.scalar(loss);
        let grads = g.backward(loss).unwrap();
        adam_step(&mut store, &grads, &mut state, &adam).unwrap();
    }
    let ht = Tensor::vector(h0);
    let mut errs = Vec::new();
    for eps in [1.0, 2.0, 4.0] {
        let lam = cumulative_intensity(&net, &store, &ht, eps).unwrap();
        errs.push((lam - RATE * eps).abs() / (RATE * eps));
    }
    let secs = start.elapsed().as_secs_f64();
    let worst = errs.iter().copied().fold(0.0, f64::max);
    Outcome::new(
        worst <= 0.15 && secs < 300.0,
        format!(
            "relative errors at 1, 2, 4 h: {:.4} {:.4} {:.4} (tolerance 0.15), final loss {last:.4}, {secs:.1} s of 300 s \
             budget",
            errs[0], errs[1], errs[2]
        ),
    )
}

fn param_bits(m: &JointModel, keep: impl Fn(&str) -> bool) -> Vec<(String, Vec<u64>)> {
    m.params
        .iter()
        .filter(|p| keep(&p.id))
        .map(|p| (p.id.clone(), p.tensor.data().iter().map(|v| v.to_bits()).collect()))
        .collect()
}

fn degenerate_equivalence() -> Outcome {
    let (cohort, _) = generate(&GeneratorConfig {
        n_patients: 300,
        seed: 6,
        ..GeneratorConfig::default()
    })
    .unwrap();
    let splits = split_random(&cohort, 0.2, 0.2, 6).unwrap();
    let cfg = TrainConfig {
        alpha: 0.0,
        lr: 1e-2,
        batch_size: 64,
        max_epochs: 20,
        joint_epochs: 12,
        hidden_dim: 6,
        seed: 6,
        ..TrainConfig::default()
    };
    let (feat, _) = train_on(&cohort, &splits, Strategy::Feature, &cfg).unwrap();
    let (dj, _) = train_on(&cohort, &splits, Strategy::DeepJoint, &cfg).unwrap();
    let shared = |id: &str| id.starts_with("enc.") || id.starts_with("surv.");
    let params_equal = param_bits(&dj, shared) == param_bits(&feat, |_| true);
    let data = prepare_subset(&cohort, &splits.test, Strategy::Feature, &feat.stats).unwrap();
    let p: Vec<_> = data.patients.iter().collect();
    let (a, b) = (feat.log_hazards(&p).unwrap(), dj.log_hazards(&p).unwrap());
    let predictions_equal = a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits());
    let breslow_equal = dj.breslow == feat.breslow;

    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut grud_equal = 0;
    for _ in 0..SEEDS_PER_COMPONENT {
        let k = rng.random_range(1..4);
        let d = rng.random_range(1..5);
        let t = rng.random_range(1..8);
        let grud = Encoder::new(
            "e",
            RecurrentConfig {
                cell: CellKind::GruD,
                input_dim: k,
                hidden_dim: d,
                num_layers: 1,
            },
        )
        .unwrap();
        let gru = Encoder::new(
            "e",
            RecurrentConfig {
                cell: CellKind::Gru,
                input_dim: 2 * k,
                hidden_dim: d,
                num_layers: 1,
            },
        )
        .unwrap();
        let mut store = ParamStore::new();
        grud.init(&mut store, &mut rng).unwrap();
        for id in ["e.decay.x_w", "e.decay.x_b", "e.decay.h_w", "e.decay.h_b"] {
            for v in store.tensor_mut(id).unwrap().data_mut() {
                *v = 0.0;
            }
        }
        let x: Vec<Vec<f64>> = (0..t)
            .map(|_| (0..k).map(|_| rng.random_range(-2.0..2.0)).collect())
            .collect();
        let dec = DecayInputs {
            mask: vec![vec![1.0; k]; t],
            delta: (0..t)
                .map(|_| (0..k).map(|_| rng.random_range(0.0..5.0)).collect())
                .collect(),
            x_last: x.clone(),
        };
        let a = encode_sequence(
            &grud,
            &store,
            &SequenceInput {
                x: x.clone(),
                decay: Some(dec),
            },
        )
        .unwrap();
        let xm = x.iter().map(|r| [r.clone(), vec![1.0; k]].concat()).collect();
        let b = encode_sequence(&gru, &store, &SequenceInput { x: xm, decay: None }).unwrap();
        let same = a.len() == b.len()
            && a.iter().zip(&b).all(|(sa, sb)| {
                sa.h.data()
                    .iter()
                    .zip(sb.h.data())
                    .all(|(u, v)| u.to_bits() == v.to_bits())
            });
        grud_equal += usize::from(same);
    }
    let pass = params_equal && predictions_equal && breslow_equal && grud_equal == SEEDS_PER_COMPONENT as usize;
    Outcome::new(
        pass,
        format!(
            "zero-alpha DeepJoint vs Feature: parameters {}, Breslow {}, test log-hazards {}; GRU-D with zero decay vs \
             GRU bitwise on {grud_equal}/{SEEDS_PER_COMPONENT} random sequences",
            same_word(params_equal),
            same_word(breslow_equal),
            same_word(predictions_equal)
        ),
    )
}

fn same_word(b: bool) -> &'static str {
    if b {
        "bitwise equal"
    } else {
        "DIFFER"
    }
}

/// Training settings of the cohort-scale experiments.
fn experiment_config(seed: u64) -> TrainConfig {
    TrainConfig {
        lr: 1e-2,
        seed,
        ..TrainConfig::default()
    }
}

fn eval_options(seed: u64) -> EvalOptions {
    EvalOptions {
        seed,
        ..EvalOptions::default()
    }
}

fn cohort_for(master: u64, gen: GeneratorConfig) -> Vec<EncounterSequence> {
    generate(&GeneratorConfig {
        seed: seed::derive(master, &["generate"]),
        ..gen
    })
    .unwrap()
    .0
}

fn run_transfer(master: u64, cohort: &[EncounterSequence], strategies: &[Strategy]) -> TransferTable {
    transfer_experiment(
        cohort,
        strategies,
        &experiment_config(seed::derive(master, &["train"])),
        0.2,
        0.1,
        seed::derive(master, &["regime-split"]),
        &eval_options(seed::derive(master, &["evaluate"])),
    )
    .unwrap()
    .table
}

fn no_shift_null() -> Outcome {
    let cohort = cohort_for(
        7,
        GeneratorConfig {
            delta_rho: 0.0,
            delta_beta: vec![0.0; 5],
            ..GeneratorConfig::default()
        },
    );
    let table = run_transfer(7, &cohort, &Strategy::ALL);
    println!("{}", table.render());
    let mut outside = Vec::new();
    let mut outside_a = Vec::new();
    for r in &table.rows {
        let within = r.difference <= 2.0 * r.difference_std;
        match (r.test_regime, within) {
            (Regime::B, false) => outside.push(format!(
                "{} ({:.4} > {:.4})",
                r.strategy,
                r.difference,
                2.0 * r.difference_std
            )),
            (Regime::A, false) => outside_a.push(r.strategy.to_string()),
            _ => {}
        }
    }
    Outcome::new(
        outside.is_empty(),
        format!(
            "{} strategies, transfer A to B outside 2 bootstrap stds: {}; reverse direction outside: {}",
            Strategy::ALL.len(),
            if outside.is_empty() {
                "none".to_string()
            } else {
                outside.join(", ")
            },
            if outside_a.is_empty() {
                "none".to_string()
            } else {
                outside_a.join(", ")
            }
        ),
    )
}

fn shift_experiment() -> Outcome {
    let start = Instant::now();
    let strategies = [Strategy::DeepJoint, Strategy::Ignore, Strategy::Resample];
    let mut losses = vec![Vec::new(); strategies.len()];
    let mut reverse = vec![Vec::new(); strategies.len()];
    for master in 0..5 {
        let cohort = cohort_for(master, GeneratorConfig::default());
        let table = run_transfer(master, &cohort, &strategies);
        println!("master seed {master}\n{}", table.render());
        for (k, &s) in strategies.iter().enumerate() {
            losses[k].push(table.row(s, Regime::B).unwrap().difference);
            reverse[k].push(table.row(s, Regime::A).unwrap().difference);
        }
    }
    let medians: Vec<f64> = losses.iter().map(|v| median(v)).collect();
    let reverse_medians: Vec<f64> = reverse.iter().map(|v| median(v)).collect();
    let secs = start.elapsed().as_secs_f64();
    let pass = medians[0] <= medians[1] && medians[0] <= medians[2] && secs < 3600.0;
    Outcome::new(
        pass,
        format!(
            "median transfer loss A to B over 5 seeds: DeepJoint {:.4}, Ignore {:.4}, Resample {:.4}; B to A: {:.4}, \
             {:.4}, {:.4}; {secs:.0} s of 3600 s budget",
            medians[0], medians[1], medians[2], reverse_medians[0], reverse_medians[1], reverse_medians[2]
        ),
    )
}

fn perturbation_trend() -> Outcome {
    let strategies = [Strategy::DeepJoint, Strategy::Feature];
    let mut deltas = vec![Vec::new(); strategies.len()];
    for master in 0..5 {
        let cohort: Vec<EncounterSequence> = cohort_for(master, GeneratorConfig::default())
            .into_iter()
            .filter(|s| s.regime == Regime::A)
            .collect();
        let splits = split_random(&cohort, 0.2, 0.1, seed::derive(master, &["split"])).unwrap();
        let test = Splits::select(&cohort, &splits.test);
        for (k, &s) in strategies.iter().enumerate() {
            let cfg = experiment_config(seed::derive(master, &["train"]));
            let (model, _) = train_on(&cohort, &splits, s, &cfg).unwrap();
            let report = perturbation_probe(
                &model,
                &cfg,
                &test,
                PerturbKind::GapJitter,
                &[0.01],
                10,
                seed::derive(master, &["perturb"]),
            )
            .unwrap();
            deltas[k].push(report.rows[0].survival);
        }
        println!(
            "master seed {master}: survival-loss change at r = 0.01, DeepJoint {:.3e}, Feature {:.3e}",
            deltas[0][master as usize], deltas[1][master as usize]
        );
    }
    let (dj, feat) = (median(&deltas[0]), median(&deltas[1]));
    Outcome::new(
        dj <= feat,
        format!("median survival-loss change under gap jitter r = 0.01 over 5 seeds: DeepJoint {dj:.3e}, Feature {feat:.3e}"),
    )
}

const SMALL: &str = "seed = 11\n\n[generator]\nn_patients = 300\n\n[train]\nlr = 0.01\nbatch_size = 128\nmax_epochs = \
                     12\njoint_epochs = 8\nhidden_dim = 6\nsearch_draws = 2\n\n[evaluation]\nbootstrap = 20\n\n[search]\nlr \
                     = [0.01]\nbatch_size = [128]\nalpha = [0.1, 0.3]\nrnn_layers = [1]\nhidden_dim = [4, 6]\nhead_layers \
                     = [1]\nhead_width = [8]\n\n[transfer]\nstrategies = [\"last\", \"deepjoint\"]\n";

fn common(config: &Path, out: PathBuf) -> Common {
    Common {
        config: Some(config.to_path_buf()),
        seed: None,
        out,
    }
}

fn flags() -> EvalFlags {
    EvalFlags {
        horizons: None,
        bootstrap: None,
    }
}

/// Runs every command twice into fresh directories and compares manifests
/// and outputs.
fn reproducibility() -> Outcome {
    let dir = tempfile::TempDir::new().unwrap();
    let cfg = dir.path().join("config.toml");
    fs::write(&cfg, SMALL).unwrap();
    let out = |name: &str, rep: usize| dir.path().join(format!("{name}{rep}"));
    let gen = out("generate", 0);
    let cohort = gen.join(COHORT_FILE);
    let ckpt = out("train", 0).join(CHECKPOINT_FILE);
    let commands = |rep: usize| -> Vec<(&'static str, Command)> {
        vec![
            (
                "generate",
                Command::Generate(GenerateArgs {
                    common: common(&cfg, out("generate", rep)),
                }),
            ),
            (
                "train",
                Command::Train(TrainArgs {
                    common: common(&cfg, out("train", rep)),
                    cohort: cohort.clone(),
                    strategy: Strategy::DeepJoint,
                    regime: None,
                }),
            ),
            (
                "evaluate",
                Command::Evaluate(EvaluateArgs {
                    common: common(&cfg, out("evaluate", rep)),
                    checkpoint: Some(ckpt.clone()),
                    oracle: None,
                    cohort: cohort.clone(),
                    split: EvalSplit::Test,
                    eval: flags(),
                }),
            ),
            (
                "oracle",
                Command::Evaluate(EvaluateArgs {
                    common: common(&cfg, out("oracle", rep)),
                    checkpoint: None,
                    oracle: Some(gen.join(TRUTH_FILE)),
                    cohort: cohort.clone(),
                    split: EvalSplit::All,
                    eval: flags(),
                }),
            ),
            (
                "transfer",
                Command::Transfer(TransferArgs {
                    common: common(&cfg, out("transfer", rep)),
                    cohort: cohort.clone(),
                    strategies: Vec::new(),
                    eval: flags(),
                }),
            ),
            (
                "perturb",
                Command::Perturb(PerturbArgs {
                    common: common(&cfg, out("perturb", rep)),
                    checkpoint: ckpt.clone(),
                    cohort: cohort.clone(),
                    radius: None,
                    kind: None,
                    n: Some(3),
                    split: EvalSplit::Test,
                }),
            ),
            (
                "search",
                Command::Search(SearchArgs {
                    common: common(&cfg, out("search", rep)),
                    cohort: cohort.clone(),
                    strategy: Strategy::DeepJoint,
                    regime: None,
                }),
            ),
        ]
    };
    let mut differing = Vec::new();
    for ((name, first), (_, second)) in commands(0).into_iter().zip(commands(1)) {
        let a = run(&first).unwrap();
        let b = run(&second).unwrap();
        let dirs = (out(name, 0), out(name, 1));
        let read = |d: &Path| {
            ExperimentManifest::read(&d.join(MANIFEST_FILE))
                .unwrap()
                .without_timings()
        };
        let files_equal = a
            .outputs
            .iter()
            .all(|f| fs::read(dirs.0.join(&f.name)).unwrap() == fs::read(dirs.1.join(&f.name)).unwrap());
        if a.without_timings() != b.without_timings() || read(&dirs.0) != read(&dirs.1) || !files_equal {
            differing.push(name);
        }
    }

    let ck = Checkpoint::load(&ckpt).unwrap();
    let copy = dir.path().join("copy.json");
    ck.save(&copy).unwrap();
    let reloaded = Checkpoint::load(&copy).unwrap();
    let cohort_data = read_cohort(&cohort).unwrap();
    let s = split_random(
        &cohort_data,
        ck.split.test_fraction,
        ck.split.val_fraction,
        ck.split.seed,
    )
    .unwrap();
    let data = prepare_subset(&cohort_data, &s.test, ck.model.strategy, &ck.model.stats).unwrap();
    let p: Vec<_> = data.patients.iter().collect();
    let mut bitwise = reloaded == ck && fs::read(&ckpt).unwrap() == fs::read(&copy).unwrap();
    for t in [1.0, 7.0, 30.0] {
        let a = ck.model.survival_at(&p, t).unwrap();
        let b = reloaded.model.survival_at(&p, t).unwrap();
        bitwise &= a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits());
    }
    let (a, b) = (
        ck.model.log_hazards(&p).unwrap(),
        reloaded.model.log_hazards(&p).unwrap(),
    );
    bitwise &= a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits());
    Outcome::new(
        differing.is_empty() && bitwise,
        format!(
            "7 commands run twice, manifests and outputs differing: {}; checkpoint round trip {}",
            if differing.is_empty() {
                "none".to_string()
            } else {
                differing.join(", ")
            },
            same_word(bitwise)
        ),
    )
}
