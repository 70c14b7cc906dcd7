use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{AdError, Graph, NodeId, ParamStore, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Softplus,
    Tanh,
    Sigmoid,
    Relu,
}

impl Activation {
    pub fn apply(self, g: &mut Graph, x: NodeId) -> Result<NodeId, AdError> {
        match self {
            Activation::Softplus => g.softplus(x),
            Activation::Tanh => g.tanh(x),
            Activation::Sigmoid => g.sigmoid(x),
            Activation::Relu => g.relu(x),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpConfig {
    pub input_dim: usize,
    /// Widths of the hidden layers; empty means a single affine map.
    pub hidden_layers: Vec<usize>,
    pub activation: Activation,
    pub output_dim: usize,
    pub output_activation: Option<Activation>,
}

impl MlpConfig {
    pub fn new(input_dim: usize, hidden_layers: Vec<usize>, output_dim: usize) -> Self {
        Self {
            input_dim,
            hidden_layers,
            activation: Activation::Softplus,
            output_dim,
            output_activation: None,
        }
    }

    fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.hidden_layers.len() + 1);
        let mut prev = self.input_dim;
        for &w in self.hidden_layers.iter().chain(std::iter::once(&self.output_dim)) {
            dims.push((prev, w));
            prev = w;
        }
        dims
    }

    fn validate(&self) -> Result<(), AdError> {
        if self.input_dim == 0 || self.output_dim == 0 || self.hidden_layers.contains(&0) {
            return Err(AdError::Contract(format!("MLP widths must be positive: {self:?}")));
        }
        Ok(())
    }
}

/// Feed-forward network `o(x) = φ(x W + b)` stacked per layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub prefix: String,
    pub cfg: MlpConfig,
}

pub(crate) fn weight_id(prefix: &str, layer: usize) -> String {
    format!("{prefix}.l{layer}.w")
}

pub(crate) fn bias_id(prefix: &str, layer: usize) -> String {
    format!("{prefix}.l{layer}.b")
}

impl Mlp {
    pub fn new(prefix: impl Into<String>, cfg: MlpConfig) -> Self {
        Self {
            prefix: prefix.into(),
            cfg,
        }
    }

    /// Registers the layer parameters, uniform in `±1/sqrt(fan_in)`.
    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) -> Result<(), AdError> {
        self.cfg.validate()?;
        for (l, (fan_in, fan_out)) in self.cfg.layer_dims().into_iter().enumerate() {
            let bound = 1.0 / (fan_in as f64).sqrt();
            store.insert_uniform(weight_id(&self.prefix, l), &[fan_in, fan_out], bound, rng)?;
            store.insert_uniform(bias_id(&self.prefix, l), &[fan_out], bound, rng)?;
        }
        Ok(())
    }

    /// Registers all-zero parameters.
    pub fn init_zeros(&self, store: &mut ParamStore) -> Result<(), AdError> {
        self.cfg.validate()?;
        for (l, (fan_in, fan_out)) in self.cfg.layer_dims().into_iter().enumerate() {
            store.insert(weight_id(&self.prefix, l), Tensor::zeros(&[fan_in, fan_out]))?;
            store.insert(bias_id(&self.prefix, l), Tensor::zeros(&[fan_out]))?;
        }
        Ok(())
    }

    /// `x` is `[batch, input_dim]`; returns `[batch, output_dim]`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: NodeId) -> Result<NodeId, AdError> {
        let shape = g.shape(x).to_vec();
        if shape.len() != 2 || shape[1] != self.cfg.input_dim {
            return Err(AdError::ShapeMismatch {
                op: "mlp_forward",
                shapes: vec![shape, vec![0, self.cfg.input_dim]],
            });
        }
        let n_layers = self.cfg.hidden_layers.len() + 1;
        let mut h = x;
        for l in 0..n_layers {
            let w = g.param(store, &weight_id(&self.prefix, l))?;
            let b = g.param(store, &bias_id(&self.prefix, l))?;
            let z = g.matmul(h, w)?;
            let z = g.add_broadcast(z, b)?;
            h = if l + 1 < n_layers {
                self.cfg.activation.apply(g, z)?
            } else if let Some(act) = self.cfg.output_activation {
                act.apply(g, z)?
            } else {
                z
            };
        }
        Ok(h)
    }

    pub fn param_prefix(&self) -> String {
        format!("{}.", self.prefix)
    }
}

/// Convenience evaluation of an MLP on a plain batch tensor.
pub fn mlp_forward(mlp: &Mlp, store: &ParamStore, x: &Tensor) -> Result<Tensor, AdError> {
    let mut g = Graph::new();
    let xi = g.constant(x.clone());
    let out = mlp.forward(&mut g, store, xi)?;
    Ok(g.value(out).clone())
}
