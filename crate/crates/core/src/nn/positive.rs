//! Monotone network for cumulative intensities.
//!
//! Every weight is squared before use and hidden activations are
//! non-decreasing, so the output is non-decreasing in every input. The
//! final SoftPlus keeps it positive, and the output is anchored so that
//! `Λ(h, 0) = 0`:
//!
//! ```text
//! Λ(h, ε) = N(h, ε) − N(h, 0)
//! ```
//!
//! The time input `ε` is concatenated to `h` at the first layer.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::mlp::{bias_id, weight_id, Activation};
use crate::autodiff::{AdError, Graph, NodeId, ParamStore, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PositiveMlpConfig {
    /// Width of the embedding `h` (the time input adds one more column).
    pub embedding_dim: usize,
    pub hidden_layers: Vec<usize>,
    pub activation: Activation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PositiveMlp {
    pub prefix: String,
    pub cfg: PositiveMlpConfig,
}

impl PositiveMlp {
    pub fn new(prefix: impl Into<String>, cfg: PositiveMlpConfig) -> Result<Self, AdError> {
        if !matches!(cfg.activation, Activation::Tanh | Activation::Softplus) {
            return Err(AdError::Contract(format!(
                "monotone network needs tanh or softplus activations, got {:?}",
                cfg.activation
            )));
        }
        if cfg.hidden_layers.contains(&0) {
            return Err(AdError::Contract("hidden widths must be positive".into()));
        }
        Ok(Self {
            prefix: prefix.into(),
            cfg,
        })
    }

    fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::new();
        let mut prev = self.cfg.embedding_dim + 1;
        for &w in self.cfg.hidden_layers.iter().chain(std::iter::once(&1)) {
            dims.push((prev, w));
            prev = w;
        }
        dims
    }

    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) -> Result<(), AdError> {
        for (l, (fan_in, fan_out)) in self.layer_dims().into_iter().enumerate() {
            let bound = 1.0 / (fan_in as f64).sqrt();
            store.insert_uniform(weight_id(&self.prefix, l), &[fan_in, fan_out], bound, rng)?;
            store.insert_uniform(bias_id(&self.prefix, l), &[fan_out], bound, rng)?;
        }
        Ok(())
    }

    /// Registers parameters with every weight equal to `w` and biases zero.
    pub fn init_constant(&self, store: &mut ParamStore, w: f64) -> Result<(), AdError> {
        for (l, (fan_in, fan_out)) in self.layer_dims().into_iter().enumerate() {
            store.insert(weight_id(&self.prefix, l), Tensor::full(&[fan_in, fan_out], w))?;
            store.insert(bias_id(&self.prefix, l), Tensor::zeros(&[fan_out]))?;
        }
        Ok(())
    }

    /// Un-anchored network `N(h, ε)` using already-squared weights.
    fn raw(&self, g: &mut Graph, layers: &[(NodeId, NodeId)], h: NodeId, eps: NodeId) -> Result<NodeId, AdError> {
        let mut x = g.concat(&[h, eps], 1)?;
        for (l, &(w2, b)) in layers.iter().enumerate() {
            let z = g.matmul(x, w2)?;
            let z = g.add_broadcast(z, b)?;
            x = if l + 1 < layers.len() {
                self.cfg.activation.apply(g, z)?
            } else {
                g.softplus(z)?
            };
        }
        Ok(x)
    }

    /// `h` is `[batch, d]`, `eps` is `[batch, 1]`; returns `Λ` as `[batch, 1]`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, h: NodeId, eps: NodeId) -> Result<NodeId, AdError> {
        let hs = g.shape(h).to_vec();
        let es = g.shape(eps).to_vec();
        if hs.len() != 2 || hs[1] != self.cfg.embedding_dim || es != [hs[0], 1] {
            return Err(AdError::ShapeMismatch {
                op: "positive_mlp_forward",
                shapes: vec![hs, es],
            });
        }
        if let Some(bad) = g.value(eps).data().iter().find(|&&e| e < 0.0) {
            return Err(AdError::Domain {
                op: "positive_mlp_forward",
                detail: format!("negative time input {bad}"),
            });
        }
        let n_layers = self.cfg.hidden_layers.len() + 1;
        let mut layers = Vec::with_capacity(n_layers);
        for l in 0..n_layers {
            let w = g.param(store, &weight_id(&self.prefix, l))?;
            let w2 = g.square(w)?;
            let b = g.param(store, &bias_id(&self.prefix, l))?;
            layers.push((w2, b));
        }
        let at_eps = self.raw(g, &layers, h, eps)?;
        let zero = g.constant(Tensor::zeros(&es));
        let at_zero = self.raw(g, &layers, h, zero)?;
        g.sub(at_eps, at_zero)
    }
}

/// `Λ(h, ε)` for a single embedding.
pub fn positive_mlp_forward(net: &PositiveMlp, store: &ParamStore, h: &Tensor, eps: f64) -> Result<f64, AdError> {
    let d = h.numel();
    let mut g = Graph::new();
    let hn = g.constant(Tensor::matrix(1, d, h.data().to_vec())?);
    let en = g.constant(Tensor::matrix(1, 1, vec![eps])?);
    let out = net.forward(&mut g, store, hn, en)?;
    Ok(g.scalar(out))
}
