//! Proportional-hazards outcome head: log-hazard network, Cox partial
//! likelihood, Breslow baseline and survival curves.

use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId, ParamStore, Tensor};
use crate::error::{Error, Result};
use crate::nn::{mlp_forward, Mlp};

/// Time to event in days from the end of the observation window.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SurvivalLabel {
    #[serde(rename = "time_days")]
    pub time: f64,
    #[serde(with = "event_flag")]
    pub event: bool,
}

impl SurvivalLabel {
    pub fn new(time: f64, event: bool) -> Result<Self> {
        let label = Self { time, event };
        label.validate()?;
        Ok(label)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.time.is_finite() && self.time > 0.0) {
            return Err(Error::Data(format!(
                "survival time must be positive, got {}",
                self.time
            )));
        }
        Ok(())
    }
}

/// Events are written as 0/1; booleans are accepted on input.
mod event_flag {
    use serde::{de, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &bool, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_u8(u8::from(*v))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<bool, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Flag {
            Int(u64),
            Bool(bool),
        }
        match Flag::deserialize(d)? {
            Flag::Bool(b) => Ok(b),
            Flag::Int(0) => Ok(false),
            Flag::Int(1) => Ok(true),
            Flag::Int(n) => Err(de::Error::custom(format!("event must be 0 or 1, got {n}"))),
        }
    }
}

pub fn count_events(labels: &[SurvivalLabel]) -> usize {
    labels.iter().filter(|l| l.event).count()
}

/// `η = S(h)` for a single embedding.
pub fn log_hazard(head: &Mlp, store: &ParamStore, h: &Tensor) -> Result<f64> {
    let x = Tensor::matrix(1, h.numel(), h.data().to_vec())?;
    let out = mlp_forward(head, store, &x)?;
    Ok(out.data()[0])
}

/// Mean over events of `η_i − log Σ_{t_j ≥ t_i} exp(η_j)`.
pub fn cox_partial_loglik(eta: &[f64], labels: &[SurvivalLabel]) -> Result<f64> {
    check_lengths(eta.len(), labels.len())?;
    let n_events = count_events(labels);
    if n_events == 0 {
        return Err(Error::NoEvents);
    }
    let mut total = 0.0;
    for (i, li) in labels.iter().enumerate() {
        if !li.event {
            continue;
        }
        let m = labels
            .iter()
            .zip(eta)
            .filter(|(lj, _)| lj.time >= li.time)
            .map(|(_, &e)| e)
            .fold(f64::NEG_INFINITY, f64::max);
        let s: f64 = labels
            .iter()
            .zip(eta)
            .filter(|(lj, _)| lj.time >= li.time)
            .map(|(_, &e)| (e - m).exp())
            .sum();
        total += eta[i] - (m + s.ln());
    }
    Ok(total / n_events as f64)
}

fn check_lengths(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::Data(format!("{a} risk scores for {b} survival labels")));
    }
    if a == 0 {
        return Err(Error::Data("empty batch".into()));
    }
    Ok(())
}

/// Negated partial log-likelihood as a graph node. `eta` is `[batch, 1]`;
/// risk sets are restricted to the batch.
pub fn cox_loss(g: &mut Graph, eta: NodeId, labels: &[SurvivalLabel]) -> Result<NodeId> {
    let b = labels.len();
    if g.shape(eta) != [b, 1] {
        return Err(Error::Data(format!(
            "risk scores have shape {:?}, expected [{b}, 1]",
            g.shape(eta)
        )));
    }
    let events: Vec<usize> = (0..b).filter(|&i| labels[i].event).collect();
    if events.is_empty() {
        return Err(Error::NoEvents);
    }
    let n_ev = events.len();
    let mut risk = Vec::with_capacity(n_ev * b);
    for &i in &events {
        risk.extend(labels.iter().map(|lj| f64::from(u8::from(lj.time >= labels[i].time))));
    }
    // The shift only stabilizes the exponentials, it needs no gradient.
    let shift = g.value(eta).data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let risk = g.constant(Tensor::matrix(n_ev, b, risk)?);
    let centered = g.add_scalar(eta, -shift)?;
    let e = g.exp(centered)?;
    let s = g.matmul(risk, e)?;
    let lse = g.log(s)?;
    let idx: Rc<[usize]> = events.into();
    let eta_ev = g.gather_rows(centered, idx)?;
    let terms = g.sub(eta_ev, lse)?;
    let total = g.sum(terms)?;
    Ok(g.scale(total, -1.0 / n_ev as f64)?)
}

/// Step function `Λ₀(t)` over the distinct event times.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BreslowTable {
    pub event_times: Vec<f64>,
    pub cumulative_baseline: Vec<f64>,
}

impl BreslowTable {
    /// `Λ₀(t)`, right-continuous, zero before the first event.
    pub fn cumulative_at(&self, t: f64) -> f64 {
        let k = self.event_times.partition_point(|&s| s <= t);
        if k == 0 {
            0.0
        } else {
            self.cumulative_baseline[k - 1]
        }
    }
}

/// Breslow estimator; tied events share one risk-set denominator.
pub fn breslow_fit(eta: &[f64], labels: &[SurvivalLabel]) -> Result<BreslowTable> {
    check_lengths(eta.len(), labels.len())?;
    let mut times: Vec<f64> = labels.iter().filter(|l| l.event).map(|l| l.time).collect();
    times.sort_by(f64::total_cmp);
    times.dedup();
    let mut cum = 0.0;
    let mut cumulative = Vec::with_capacity(times.len());
    for &t in &times {
        let d = labels.iter().filter(|l| l.event && l.time == t).count() as f64;
        let denom: f64 = labels
            .iter()
            .zip(eta)
            .filter(|(l, _)| l.time >= t)
            .map(|(_, &e)| e.exp())
            .sum();
        if !(denom.is_finite() && denom > 0.0) {
            return Err(Error::Numerical(format!("Breslow risk-set sum {denom} at t={t}")));
        }
        cum += d / denom;
        cumulative.push(cum);
    }
    Ok(BreslowTable {
        event_times: times,
        cumulative_baseline: cumulative,
    })
}

/// `S(t | η) = exp(−Λ₀(t) e^η)`.
pub fn predict_survival(table: &BreslowTable, eta: f64, t: f64) -> Result<f64> {
    if t.is_nan() || t < 0.0 {
        return Err(Error::Domain(format!("horizon must be non-negative, got {t}")));
    }
    let base = table.cumulative_at(t);
    if base == 0.0 {
        return Ok(1.0);
    }
    Ok((-base * eta.exp()).exp())
}
