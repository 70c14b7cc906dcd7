//! Observation-process heads: time to the next encounter (`I`) and which labs
//! it will contain (`M`).
//!
//! `P(E < ε | h) = 1 − exp(−Λ(h, ε))` with `Λ` the monotone network, and the
//! density `λ = ∂Λ/∂ε` is built as a derivative graph so that the interval
//! negative log-likelihood `Λ − log λ` can be trained.

use serde::{Deserialize, Serialize};

use crate::autodiff::{sigmoid, Graph, NodeId, ParamStore, Tensor};
use crate::error::{Error, Result};
use crate::nn::{mlp_forward, positive_mlp_forward, Mlp, PositiveMlp};

/// Added inside `log λ` so that a saturated or zero-weight head gives a large
/// finite loss rather than a domain error.
pub const DENSITY_FLOOR: f64 = 1e-12;
pub const PROB_CLAMP: f64 = 1e-12;

/// Targets of one interval: the gap to the next encounter and its mask.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PresenceTarget {
    /// Hours.
    pub next_gap: f64,
    pub next_mask: Vec<f64>,
    /// True for the open interval between the last encounter and the end of
    /// the window.
    pub censored: bool,
}

fn check_eps(eps: f64) -> Result<()> {
    if eps.is_nan() || eps < 0.0 {
        return Err(Error::Domain(format!("time gap must be non-negative, got {eps}")));
    }
    Ok(())
}

/// `Λ(h, ε)`.
pub fn cumulative_intensity(head: &PositiveMlp, store: &ParamStore, h: &Tensor, eps: f64) -> Result<f64> {
    check_eps(eps)?;
    Ok(positive_mlp_forward(head, store, h, eps)?)
}

/// `(Λ(h, ε), λ(h, ε))` for a single embedding.
pub fn intensity_and_density(head: &PositiveMlp, store: &ParamStore, h: &Tensor, eps: f64) -> Result<(f64, f64)> {
    check_eps(eps)?;
    let mut g = Graph::new();
    let hn = g.constant(Tensor::matrix(1, h.numel(), h.data().to_vec())?);
    let en = g.input(Tensor::matrix(1, 1, vec![eps])?);
    let lam = head.forward(&mut g, store, hn, en)?;
    let dens = g.grad_wrt_input(lam, en)?;
    Ok((g.scalar(lam), g.scalar(dens)))
}

/// Interval-level loss terms `Λ − log(λ + floor)` as `[n, 1]`, plus `λ`.
///
/// `h` is `[n, d]`, `eps` has one gap in hours per row.
pub fn interval_nll(
    g: &mut Graph,
    head: &PositiveMlp,
    store: &ParamStore,
    h: NodeId,
    eps: &[f64],
) -> Result<(NodeId, NodeId)> {
    for &e in eps {
        check_eps(e)?;
    }
    let n = eps.len();
    let en = g.input(Tensor::matrix(n, 1, eps.to_vec())?);
    let lam = head.forward(g, store, h, en)?;
    // Rows are independent, so the gradient of the sum is the per-row density.
    let total = g.sum(lam)?;
    let dens = g.grad_wrt_input(total, en)?;
    if let Some(bad) = g.value(dens).data().iter().find(|&&v| !(v >= 0.0)) {
        return Err(Error::Numerical(format!("negative gap density {bad}")));
    }
    let shifted = g.add_scalar(dens, DENSITY_FLOOR)?;
    let log_dens = g.log(shifted)?;
    Ok((g.sub(lam, log_dens)?, dens))
}

/// Per-row censored terms `Λ(h, ε)`, as `[n, 1]`.
pub fn censored_terms(g: &mut Graph, head: &PositiveMlp, store: &ParamStore, h: NodeId, eps: &[f64]) -> Result<NodeId> {
    for &e in eps {
        check_eps(e)?;
    }
    let en = g.constant(Tensor::matrix(eps.len(), 1, eps.to_vec())?);
    Ok(head.forward(g, store, h, en)?)
}

/// `Σ_r w_r · terms_r` for a `[n, 1]` term column.
pub fn weighted_sum(g: &mut Graph, terms: NodeId, weights: &[f64]) -> Result<NodeId> {
    let n = weights.len();
    let w = g.constant(Tensor::matrix(n, 1, weights.to_vec())?);
    let wt = g.mul_broadcast(terms, w)?;
    Ok(g.sum(wt)?)
}

/// Observation probabilities `M(h, ε)` clamped away from 0 and 1.
pub fn missingness_probs(head: &Mlp, store: &ParamStore, h: &Tensor, eps: f64) -> Result<Vec<f64>> {
    check_eps(eps)?;
    let mut row = h.data().to_vec();
    row.push(eps);
    let x = Tensor::matrix(1, row.len(), row)?;
    let logits = mlp_forward(head, store, &x)?;
    Ok(logits
        .data()
        .iter()
        .map(|&z| sigmoid(z).clamp(PROB_CLAMP, 1.0 - PROB_CLAMP))
        .collect())
}

/// Binary cross-entropy summed over labs, `[n, 1]`, from logits.
///
/// `softplus(z) − o·z` equals `−o log σ(z) − (1−o) log(1−σ(z))` without
/// forming the probabilities.
pub fn bce_terms(
    g: &mut Graph,
    head: &Mlp,
    store: &ParamStore,
    h: NodeId,
    eps: &[f64],
    masks: &[Vec<f64>],
) -> Result<NodeId> {
    let n = eps.len();
    let k = head.cfg.output_dim;
    if masks.len() != n || masks.iter().any(|m| m.len() != k) {
        return Err(Error::Data(format!("need {n} target masks of width {k}")));
    }
    for &e in eps {
        check_eps(e)?;
    }
    let en = g.constant(Tensor::matrix(n, 1, eps.to_vec())?);
    let x = g.concat(&[h, en], 1)?;
    let z = head.forward(g, store, x)?;
    let o = g.constant(Tensor::matrix(n, k, masks.concat())?);
    let sp = g.softplus(z)?;
    let oz = g.mul(o, z)?;
    let per = g.sub(sp, oz)?;
    Ok(g.sum_to(per, &[n, 1])?)
}

/// Weights `1 / (P · c_i)` spreading each of `P` patients' `c_i` intervals so
/// that a weighted sum is the mean over patients of per-patient means.
pub fn patient_mean_weights(counts: &[usize]) -> Vec<f64> {
    let p = counts.iter().filter(|&&c| c > 0).count();
    let mut out = Vec::new();
    for &c in counts {
        for _ in 0..c {
            out.push(1.0 / (p as f64 * c as f64));
        }
    }
    out
}

/// Reference loss for one patient's intervals under a single embedding per
/// interval: mean of `Λ − log λ`.
pub fn temporal_nll(
    head: &PositiveMlp,
    store: &ParamStore,
    states: &[Tensor],
    targets: &[PresenceTarget],
) -> Result<Option<f64>> {
    let mut terms = Vec::new();
    for (h, t) in states.iter().zip(targets) {
        if t.censored {
            continue;
        }
        if !(t.next_gap > 0.0) {
            return Err(Error::Data(format!(
                "interval gap must be positive, got {}",
                t.next_gap
            )));
        }
        let (lam, dens) = intensity_and_density(head, store, h, t.next_gap)?;
        terms.push(lam - (dens + DENSITY_FLOOR).ln());
    }
    if terms.is_empty() {
        return Ok(None);
    }
    Ok(Some(terms.iter().sum::<f64>() / terms.len() as f64))
}
