//! Central finite-difference checks of reverse-mode gradients.

use crate::autodiff::{AdError, Graph, NodeId, ParamStore};

/// Errors below this magnitude are measured absolutely rather than relative
/// to the gradient, since finite differences carry ~1e-11 noise.
pub const REL_FLOOR: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Parameter id and flat index of the worst entry.
    pub worst: Option<(String, usize)>,
    pub checked: usize,
}

pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Compares `backward` against `(f(θ+h) − f(θ−h)) / 2h` for every trainable
/// entry. `build` must construct the same scalar root on each call.
pub fn check_gradients<F>(store: &ParamStore, step: f64, build: F) -> Result<GradCheckReport, AdError>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<NodeId, AdError>,
{
    let mut g = Graph::new();
    let root = build(&mut g, store)?;
    let grads = g.backward(root)?;
    let eval = |s: &ParamStore| -> Result<f64, AdError> {
        let mut g = Graph::new();
        let r = build(&mut g, s)?;
        Ok(g.scalar(r))
    };

    let mut probe = store.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
    };
    let ids: Vec<String> = store.iter().filter(|p| p.requires_grad).map(|p| p.id.clone()).collect();
    for id in ids {
        let n = store.tensor(&id).map_or(0, |t| t.numel());
        for k in 0..n {
            let orig = store.tensor(&id).expect("listed").data()[k];
            probe.tensor_mut(&id).expect("listed").data_mut()[k] = orig + step;
            let up = eval(&probe)?;
            probe.tensor_mut(&id).expect("listed").data_mut()[k] = orig - step;
            let down = eval(&probe)?;
            probe.tensor_mut(&id).expect("listed").data_mut()[k] = orig;
            let numeric = (up - down) / (2.0 * step);
            let analytic = grads.get(&id).map_or(0.0, |t| t.data()[k]);
            let err = rel_error(analytic, numeric);
            report.checked += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = err;
                report.worst = Some((id.clone(), k));
            }
        }
    }
    Ok(report)
}
