use std::collections::{BTreeMap, HashMap};

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use super::AdError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Parameter {
    pub id: String,
    pub tensor: Tensor,
    pub requires_grad: bool,
}

/// Named parameters of a model, in insertion order.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(from = "Vec<Parameter>", into = "Vec<Parameter>")]
pub struct ParamStore {
    params: Vec<Parameter>,
    index: HashMap<String, usize>,
}

impl From<Vec<Parameter>> for ParamStore {
    fn from(params: Vec<Parameter>) -> Self {
        let index = params.iter().enumerate().map(|(i, p)| (p.id.clone(), i)).collect();
        Self { params, index }
    }
}

impl From<ParamStore> for Vec<Parameter> {
    fn from(store: ParamStore) -> Self {
        store.params
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, id: impl Into<String>, tensor: Tensor) -> Result<(), AdError> {
        let id = id.into();
        if self.index.contains_key(&id) {
            return Err(AdError::DuplicateParameter(id));
        }
        self.index.insert(id.clone(), self.params.len());
        self.params.push(Parameter {
            id,
            tensor,
            requires_grad: true,
        });
        Ok(())
    }

    /// Inserts a tensor drawn uniformly from `[-bound, bound]`.
    pub fn insert_uniform<R: Rng + ?Sized>(
        &mut self,
        id: impl Into<String>,
        shape: &[usize],
        bound: f64,
        rng: &mut R,
    ) -> Result<(), AdError> {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.random_range(-bound..=bound)).collect();
        self.insert(id, Tensor::new(shape.to_vec(), data)?)
    }

    pub fn get(&self, id: &str) -> Option<&Parameter> {
        self.index.get(id).map(|&i| &self.params[i])
    }

    pub fn tensor(&self, id: &str) -> Option<&Tensor> {
        self.get(id).map(|p| &p.tensor)
    }

    pub fn tensor_mut(&mut self, id: &str) -> Option<&mut Tensor> {
        let i = *self.index.get(id)?;
        Some(&mut self.params[i].tensor)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Sets `requires_grad` on every parameter whose id starts with `prefix`.
    pub fn set_trainable(&mut self, prefix: &str, trainable: bool) {
        for p in &mut self.params {
            if p.id.starts_with(prefix) {
                p.requires_grad = trainable;
            }
        }
    }

    pub fn set_all_trainable(&mut self, trainable: bool) {
        for p in &mut self.params {
            p.requires_grad = trainable;
        }
    }

    /// Copies tensors of every id present in `other`.
    pub fn copy_values_from(&mut self, other: &ParamStore) {
        for p in &other.params {
            if let Some(t) = self.tensor_mut(&p.id) {
                *t = p.tensor.clone();
            }
        }
    }
}

/// Gradient map keyed by parameter id.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Gradients {
    grads: BTreeMap<String, Tensor>,
}

impl Gradients {
    pub(crate) fn from_map(grads: BTreeMap<String, Tensor>) -> Self {
        Self { grads }
    }

    pub fn get(&self, id: &str) -> Option<&Tensor> {
        self.grads.get(id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.grads.iter()
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn global_norm(&self) -> f64 {
        self.grads
            .values()
            .flat_map(|t| t.data().iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    /// Associative reduction of gradients computed on separate graphs.
    pub fn accumulate(&mut self, other: &Gradients) {
        for (id, t) in &other.grads {
            match self.grads.get_mut(id) {
                Some(acc) => acc.add_assign(t),
                None => {
                    self.grads.insert(id.clone(), t.clone());
                }
            }
        }
    }

    pub fn scale(&mut self, c: f64) {
        for t in self.grads.values_mut() {
            for v in t.data_mut() {
                *v *= c;
            }
        }
    }
}
