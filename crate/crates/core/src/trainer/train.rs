use std::rc::Rc;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{combined_loss, DwaState, Head, HeadSet, JointModel, TrainConfig};
use crate::autodiff::{adam_step, AdamConfig, AdamState, Graph, NodeId, ParamStore, Tensor};
use crate::data::{PreparedDataset, PreparedPatient};
use crate::error::{Error, Result};
use crate::presence::{bce_terms, censored_terms, interval_nll, patient_mean_weights, weighted_sum};
use crate::seed;
use crate::survival::{breslow_fit, count_events, cox_loss, cox_partial_loglik, SurvivalLabel};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "head")]
pub enum Phase {
    /// Encoder and all enabled heads together.
    Joint,
    /// One head on frozen embeddings.
    FineTune(Head),
}

/// Loss components; absent tasks are `None`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub survival: Option<f64>,
    pub temporal: Option<f64>,
    pub missingness: Option<f64>,
    pub combined: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub phase: Phase,
    pub epoch: usize,
    pub train: LossParts,
    pub val: f64,
    /// DWA weights `[w_I, w_M]` used during the epoch.
    pub weights: [f64; 2],
    pub improved: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    /// Best validation loss per phase, in phase order.
    pub best: Vec<(Phase, f64)>,
}

/// Where the embeddings of a batch come from.
enum Source<'a> {
    /// Run the encoder (or read the static inputs) inside the graph.
    Model,
    /// Fixed per-encounter embeddings `[len, d]`.
    Frozen(&'a [Tensor]),
}

struct BatchLosses {
    survival: Option<NodeId>,
    temporal: Option<NodeId>,
    missingness: Option<NodeId>,
    /// Patients that contributed presence intervals.
    presence_patients: usize,
}

fn labels_of(patients: &[&PreparedPatient]) -> Vec<SurvivalLabel> {
    patients.iter().map(|p| p.label).collect()
}

/// Builds every requested loss for one batch. `idx` indexes into `patients`
/// (and into `frozen` when given).
fn batch_losses(
    g: &mut Graph,
    model: &JointModel,
    patients: &[&PreparedPatient],
    source: &Source<'_>,
    want: HeadSet,
    want_survival: bool,
    censored_tail: bool,
) -> Result<BatchLosses> {
    let store = &model.params;
    let (states, last, row_of): (Option<NodeId>, NodeId, Box<dyn Fn(usize, usize) -> usize>) =
        match (source, &model.encoder) {
            (Source::Model, None) => {
                let x = model.static_inputs(g, patients)?;
                (None, x, Box::new(|_, _| 0))
            }
            (Source::Model, Some(enc)) => {
                let seqs = JointModel::sequences(patients);
                let e = enc.encode_batch(g, store, &seqs)?;
                let (states, last) = (e.states, e.last);
                (Some(states), last, Box::new(move |b, t| e.row(b, t)))
            }
            (Source::Frozen(emb), _) => {
                let d = emb[0].shape()[1];
                let mut offsets = Vec::with_capacity(emb.len());
                let mut data = Vec::new();
                let mut last_rows = Vec::with_capacity(emb.len());
                for e in emb.iter() {
                    offsets.push(data.len() / d);
                    data.extend_from_slice(e.data());
                    last_rows.push(data.len() / d - 1);
                }
                let n = data.len() / d;
                let states = g.constant(Tensor::matrix(n, d, data)?);
                let last_rows: Rc<[usize]> = last_rows.into();
                let last = g.gather_rows(states, last_rows)?;
                (Some(states), last, Box::new(move |b, t| offsets[b] + t))
            }
        };

    let survival = if want_survival && count_events(&labels_of(patients)) > 0 {
        let eta = model.survival.forward(g, store, last)?;
        Some(cox_loss(g, eta, &labels_of(patients))?)
    } else {
        None
    };

    let mut out = BatchLosses {
        survival,
        temporal: None,
        missingness: None,
        presence_patients: 0,
    };
    if want.n_presence() == 0 {
        return Ok(out);
    }
    let states = states.ok_or_else(|| Error::Config("presence heads need an encoder".into()))?;

    let mut rows = Vec::new();
    let mut gaps = Vec::new();
    let mut masks = Vec::new();
    let mut counts = Vec::with_capacity(patients.len());
    let mut tail_rows = Vec::new();
    let mut tail_gaps = Vec::new();
    let mut tail_counts = Vec::new();
    for (b, p) in patients.iter().enumerate() {
        let mut c = 0;
        for (t, target) in p.targets.iter().enumerate() {
            if target.censored {
                if censored_tail && target.next_gap > 0.0 {
                    tail_rows.push(row_of(b, t));
                    tail_gaps.push(target.next_gap);
                    tail_counts.push(p.n_intervals() + 1);
                }
                continue;
            }
            rows.push(row_of(b, t));
            gaps.push(target.next_gap);
            masks.push(target.next_mask.clone());
            c += 1;
        }
        counts.push(c);
    }
    out.presence_patients = counts.iter().filter(|&&c| c > 0).count();
    if out.presence_patients == 0 {
        return Ok(out);
    }
    let weights = patient_mean_weights(&counts);
    let h = g.gather_rows(states, rows.into())?;

    if let (true, Some(head)) = (want.temporal, &model.temporal) {
        let (terms, _) = interval_nll(g, head, store, h, &gaps)?;
        let mut loss = weighted_sum(g, terms, &weights)?;
        if !tail_rows.is_empty() {
            // Tail intervals share the per-patient normalisation.
            let p = out.presence_patients as f64;
            let tw: Vec<f64> = tail_counts.iter().map(|&c| 1.0 / (p * c as f64)).collect();
            let ht = g.gather_rows(states, tail_rows.into())?;
            let tt = censored_terms(g, head, store, ht, &tail_gaps)?;
            let tail = weighted_sum(g, tt, &tw)?;
            loss = g.add(loss, tail)?;
        }
        out.temporal = Some(loss);
    }
    if let (true, Some(head)) = (want.missingness, &model.missingness) {
        let terms = bce_terms(g, head, store, h, &gaps, &masks)?;
        out.missingness = Some(weighted_sum(g, terms, &weights)?);
    }
    Ok(out)
}

fn scaled_sum(g: &mut Graph, parts: &[(NodeId, f64)]) -> Result<Option<NodeId>> {
    let mut acc: Option<NodeId> = None;
    for &(n, c) in parts {
        let t = if c == 1.0 { n } else { g.scale(n, c)? };
        acc = Some(match acc {
            None => t,
            Some(a) => g.add(a, t)?,
        });
    }
    Ok(acc)
}

/// Graph form of the combined loss; `α = 0` reduces to `l_S` exactly.
fn combined_node(g: &mut Graph, l: &BatchLosses, weights: [f64; 2], alpha: f64) -> Result<Option<NodeId>> {
    let mut parts = Vec::new();
    if alpha == 0.0 {
        if let Some(s) = l.survival {
            parts.push((s, 1.0));
        }
        return scaled_sum(g, &parts);
    }
    let presence = l.temporal.is_some() || l.missingness.is_some();
    if let Some(s) = l.survival {
        parts.push((s, if presence { 1.0 - alpha } else { 1.0 }));
    }
    if let Some(t) = l.temporal {
        parts.push((t, alpha * weights[0]));
    }
    if let Some(m) = l.missingness {
        parts.push((m, alpha * weights[1]));
    }
    scaled_sum(g, &parts)
}

fn check_finite(v: f64, what: &str, epoch: usize, batch: usize, parts: &LossParts) -> Result<()> {
    if v.is_finite() {
        return Ok(());
    }
    Err(Error::Numerical(format!(
        "{what} is {v} at epoch {epoch}, batch {batch} \
         (survival {:?}, temporal {:?}, missingness {:?})",
        parts.survival, parts.temporal, parts.missingness
    )))
}

/// Running means over batches, weighted by contributing patients.
#[derive(Default)]
struct Averager {
    sum: [f64; 4],
    weight: [f64; 4],
}

impl Averager {
    fn add(&mut self, k: usize, v: Option<f64>, w: f64) {
        if let Some(v) = v {
            self.sum[k] += v * w;
            self.weight[k] += w;
        }
    }

    fn get(&self, k: usize) -> Option<f64> {
        (self.weight[k] > 0.0).then(|| self.sum[k] / self.weight[k])
    }
}

struct Trainable<'a> {
    prefixes: Vec<String>,
    label: &'a str,
}

fn set_trainable(store: &mut ParamStore, t: &Trainable<'_>) {
    store.set_all_trainable(false);
    for p in &t.prefixes {
        store.set_trainable(p, true);
    }
}

/// Validation losses with `w = 1`.
fn validation_parts(
    model: &JointModel,
    val: &[&PreparedPatient],
    frozen: Option<&[Tensor]>,
    want: HeadSet,
    want_survival: bool,
    cfg: &TrainConfig,
) -> Result<LossParts> {
    let mut parts = LossParts::default();
    if want_survival {
        let eta = match frozen {
            None => model.log_hazards(val)?,
            Some(emb) => {
                let mut g = Graph::new();
                let d = emb[0].shape()[1];
                let data: Vec<f64> = emb.iter().flat_map(|e| e.row(e.shape()[0] - 1).to_vec()).collect();
                let x = g.constant(Tensor::matrix(emb.len(), d, data)?);
                let eta = model.survival.forward(&mut g, &model.params, x)?;
                g.value(eta).data().to_vec()
            }
        };
        parts.survival = Some(-cox_partial_loglik(&eta, &labels_of(val))?);
    }
    if want.n_presence() > 0 {
        let mut avg = Averager::default();
        let chunk = cfg.batch_size.max(1);
        for (ci, part) in val.chunks(chunk).enumerate() {
            let mut g = Graph::new();
            let slice;
            let source = match frozen {
                None => Source::Model,
                Some(emb) => {
                    slice = &emb[ci * chunk..ci * chunk + part.len()];
                    Source::Frozen(slice)
                }
            };
            let l = batch_losses(&mut g, model, part, &source, want, false, cfg.censored_tail)?;
            let w = l.presence_patients as f64;
            avg.add(1, l.temporal.map(|n| g.scalar(n)), w);
            avg.add(2, l.missingness.map(|n| g.scalar(n)), w);
        }
        parts.temporal = avg.get(1);
        parts.missingness = avg.get(2);
    }
    let alpha = if want_survival { cfg.alpha } else { 1.0 };
    parts.combined = if want_survival {
        combined_loss(
            parts.survival.unwrap_or(0.0),
            parts.temporal,
            parts.missingness,
            [1.0, 1.0],
            alpha,
        )?
    } else {
        parts.temporal.unwrap_or(0.0) + parts.missingness.unwrap_or(0.0)
    };
    Ok(parts)
}

/// One phase of minibatch Adam with early stopping; restores the best
/// parameters. `frozen` holds fixed embeddings aligned with `train`/`val`.
#[allow(clippy::too_many_arguments)]
fn run_phase(
    model: &mut JointModel,
    train: &[&PreparedPatient],
    val: &[&PreparedPatient],
    frozen: Option<(&[Tensor], &[Tensor])>,
    phase: Phase,
    want: HeadSet,
    want_survival: bool,
    epochs: usize,
    trainable: &Trainable<'_>,
    cfg: &TrainConfig,
    history: &mut TrainHistory,
) -> Result<()> {
    if epochs == 0 {
        return Ok(());
    }
    set_trainable(&mut model.params, trainable);
    let adam = AdamConfig {
        clip_norm: cfg.clip_norm,
        ..AdamConfig::with_lr(cfg.lr)
    };
    let mut state = AdamState::new();
    let mut dwa = DwaState::default();
    let mut best = f64::INFINITY;
    let mut best_params = model.params.clone();
    let mut wait = 0;
    let tag = trainable.label;
    for epoch in 0..epochs {
        let weights = if want_survival {
            dwa.weights(cfg.theta, want)
        } else {
            [1.0, 1.0]
        };
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut seed::rng(cfg.seed, &["epoch", tag, &epoch.to_string()]));
        let mut avg = Averager::default();
        for (bi, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let patients: Vec<&PreparedPatient> = chunk.iter().map(|&i| train[i]).collect();
            let emb: Vec<Tensor>;
            let source = match frozen {
                None => Source::Model,
                Some((tr, _)) => {
                    emb = chunk.iter().map(|&i| tr[i].clone()).collect();
                    Source::Frozen(&emb)
                }
            };
            let mut g = Graph::new();
            let l = batch_losses(
                &mut g,
                model,
                &patients,
                &source,
                want,
                want_survival,
                cfg.censored_tail,
            )?;
            let alpha = if want_survival { cfg.alpha } else { 1.0 };
            let Some(total) = combined_node(&mut g, &l, weights, alpha)? else {
                continue;
            };
            let parts = LossParts {
                survival: l.survival.map(|n| g.scalar(n)),
                temporal: l.temporal.map(|n| g.scalar(n)),
                missingness: l.missingness.map(|n| g.scalar(n)),
                combined: g.scalar(total),
            };
            check_finite(parts.combined, "training loss", epoch, bi, &parts)?;
            let grads = g.backward(total)?;
            if !grads.global_norm().is_finite() {
                return Err(Error::Numerical(format!(
                    "non-finite gradient at epoch {epoch}, batch {bi} (loss {:?})",
                    parts
                )));
            }
            adam_step(&mut model.params, &grads, &mut state, &adam)?;
            let n = patients.len() as f64;
            let w = l.presence_patients as f64;
            avg.add(0, parts.survival, n);
            avg.add(1, parts.temporal, w);
            avg.add(2, parts.missingness, w);
            avg.add(3, Some(parts.combined), n);
        }
        dwa.record([avg.get(1).unwrap_or(0.0), avg.get(2).unwrap_or(0.0)]);
        let vp = validation_parts(model, val, frozen.map(|f| f.1), want, want_survival, cfg)?;
        check_finite(vp.combined, "validation loss", epoch, 0, &vp)?;
        let improved = vp.combined < best;
        if improved {
            best = vp.combined;
            best_params = model.params.clone();
            wait = 0;
        } else {
            wait += 1;
        }
        history.epochs.push(EpochRecord {
            phase,
            epoch,
            train: LossParts {
                survival: avg.get(0),
                temporal: avg.get(1),
                missingness: avg.get(2),
                combined: avg.get(3).unwrap_or(f64::NAN),
            },
            val: vp.combined,
            weights,
            improved,
        });
        log::debug!("{tag} epoch {epoch}: val {:.6}", vp.combined);
        if wait >= cfg.patience {
            break;
        }
    }
    model.params = best_params;
    model.params.set_all_trainable(true);
    history.best.push((phase, best));
    Ok(())
}

/// Trains `model` on `train` with early stopping on `val`, then refits the
/// Breslow baseline on `train`.
///
/// Sequence models run the joint phase for `joint_epochs`, then fine-tune each
/// enabled head on frozen embeddings for the remaining epochs. Static models
/// train the survival head for `max_epochs`.
pub fn train_joint(
    model: &mut JointModel,
    train: &PreparedDataset,
    val: &PreparedDataset,
    cfg: &TrainConfig,
) -> Result<TrainHistory> {
    cfg.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::Data("training and validation splits must be non-empty".into()));
    }
    for ds in [train, val] {
        if ds.strategy != model.strategy {
            return Err(Error::Data(format!(
                "dataset prepared for {}, model expects {}",
                ds.strategy, model.strategy
            )));
        }
    }
    if count_events(&train.labels()) == 0 {
        return Err(Error::NoEvents);
    }
    if count_events(&val.labels()) == 0 {
        return Err(Error::Data("validation split has no events".into()));
    }
    let tr: Vec<&PreparedPatient> = train.patients.iter().collect();
    let va: Vec<&PreparedPatient> = val.patients.iter().collect();
    model.check_patients(&tr)?;
    model.check_patients(&va)?;

    let mut history = TrainHistory::default();
    let heads = model.heads;
    let mut all = vec![model.survival.param_prefix()];
    if let Some(e) = &model.encoder {
        all.push(e.param_prefix());
    }
    if let Some(t) = &model.temporal {
        all.push(format!("{}.", t.prefix));
    }
    if let Some(m) = &model.missingness {
        all.push(m.param_prefix());
    }

    if model.encoder.is_none() {
        let t = Trainable {
            prefixes: all,
            label: "static",
        };
        run_phase(
            model,
            &tr,
            &va,
            None,
            Phase::Joint,
            heads,
            true,
            cfg.max_epochs,
            &t,
            cfg,
            &mut history,
        )?;
    } else {
        let t = Trainable {
            prefixes: all,
            label: "joint",
        };
        run_phase(
            model,
            &tr,
            &va,
            None,
            Phase::Joint,
            heads,
            true,
            cfg.joint_epochs,
            &t,
            cfg,
            &mut history,
        )?;

        let rest = cfg.max_epochs - cfg.joint_epochs;
        if rest > 0 {
            let chunk = cfg.batch_size.max(64);
            let emb_tr = model.embeddings(&tr, chunk)?;
            let emb_va = model.embeddings(&va, chunk)?;
            let frozen = Some((emb_tr.as_slice(), emb_va.as_slice()));
            let surv = Trainable {
                prefixes: vec![model.survival.param_prefix()],
                label: "fine-tune-S",
            };
            run_phase(
                model,
                &tr,
                &va,
                frozen,
                Phase::FineTune(Head::S),
                HeadSet::SURVIVAL_ONLY,
                true,
                rest,
                &surv,
                cfg,
                &mut history,
            )?;
            if let Some(prefix) = model.temporal.as_ref().map(|t| format!("{}.", t.prefix)) {
                let only = HeadSet {
                    temporal: true,
                    missingness: false,
                };
                let t = Trainable {
                    prefixes: vec![prefix],
                    label: "fine-tune-I",
                };
                run_phase(
                    model,
                    &tr,
                    &va,
                    frozen,
                    Phase::FineTune(Head::I),
                    only,
                    false,
                    rest,
                    &t,
                    cfg,
                    &mut history,
                )?;
            }
            if let Some(prefix) = model.missingness.as_ref().map(|m| m.param_prefix()) {
                let only = HeadSet {
                    temporal: false,
                    missingness: true,
                };
                let t = Trainable {
                    prefixes: vec![prefix],
                    label: "fine-tune-M",
                };
                run_phase(
                    model,
                    &tr,
                    &va,
                    frozen,
                    Phase::FineTune(Head::M),
                    only,
                    false,
                    rest,
                    &t,
                    cfg,
                    &mut history,
                )?;
            }
        }
    }

    let eta = model.log_hazards(&tr)?;
    model.breslow = Some(breslow_fit(&eta, &train.labels())?);
    Ok(history)
}

/// Per-head losses of a trained model on `data`, with unit DWA weights.
pub fn dataset_losses(model: &JointModel, data: &PreparedDataset, cfg: &TrainConfig) -> Result<LossParts> {
    if data.strategy != model.strategy {
        return Err(Error::Data(format!(
            "dataset prepared for {}, model expects {}",
            data.strategy, model.strategy
        )));
    }
    let patients: Vec<&PreparedPatient> = data.patients.iter().collect();
    model.check_patients(&patients)?;
    validation_parts(model, &patients, None, model.heads, true, cfg)
}
