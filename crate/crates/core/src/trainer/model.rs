use serde::{Deserialize, Serialize};

use super::{HeadSet, TrainConfig};
use crate::autodiff::{Graph, NodeId, ParamStore, Tensor};
use crate::data::{ModelInput, NormStats, PreparedPatient, Strategy};
use crate::error::{Error, Result};
use crate::nn::{
    Activation, CellKind, Encoder, Mlp, MlpConfig, PositiveMlp, PositiveMlpConfig, RecurrentConfig, SequenceInput,
};
use crate::seed;
use crate::survival::{predict_survival, BreslowTable};

/// Shared encoder (absent for static strategies), the three heads and the
/// fitted baseline hazard.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointModel {
    pub strategy: Strategy,
    pub n_labs: usize,
    pub heads: HeadSet,
    pub encoder: Option<Encoder>,
    pub survival: Mlp,
    pub temporal: Option<PositiveMlp>,
    pub missingness: Option<Mlp>,
    pub params: ParamStore,
    pub stats: NormStats,
    pub breslow: Option<BreslowTable>,
}

const ACTIVATION: Activation = Activation::Tanh;

fn mlp_cfg(input: usize, layers: usize, width: usize, output: usize) -> MlpConfig {
    let mut c = MlpConfig::new(input, vec![width; layers], output);
    c.activation = ACTIVATION;
    c
}

impl JointModel {
    /// Fresh model; each module draws its initial weights from its own
    /// stream so enabling a head never changes the others' initialisation.
    pub fn new(strategy: Strategy, stats: NormStats, cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let k = stats.n_labs();
        let heads = cfg.head_set(strategy)?;
        let input = strategy.input_dim(k);
        let mut params = ParamStore::new();
        let init_rng = |name: &str| seed::rng(cfg.seed, &["init", name]);

        let (encoder, emb) = if strategy.is_static() {
            (None, input)
        } else {
            let cell = if strategy == Strategy::GruD {
                CellKind::GruD
            } else {
                CellKind::Lstm
            };
            let enc = Encoder::new(
                "enc",
                RecurrentConfig {
                    cell,
                    input_dim: input,
                    hidden_dim: cfg.hidden_dim,
                    num_layers: cfg.rnn_layers,
                },
            )?;
            enc.init(&mut params, &mut init_rng("encoder"))?;
            (Some(enc), cfg.hidden_dim)
        };

        let survival = Mlp::new("surv", mlp_cfg(emb, cfg.survival_layers, cfg.survival_width, 1));
        survival.init(&mut params, &mut init_rng("survival"))?;

        let temporal = if heads.temporal {
            let net = PositiveMlp::new(
                "temporal",
                PositiveMlpConfig {
                    embedding_dim: emb,
                    hidden_layers: vec![cfg.temporal_width; cfg.temporal_layers],
                    activation: ACTIVATION,
                },
            )?;
            net.init(&mut params, &mut init_rng("temporal"))?;
            Some(net)
        } else {
            None
        };

        let missingness = if heads.missingness {
            let net = Mlp::new(
                "missing",
                mlp_cfg(emb + 1, cfg.missingness_layers, cfg.missingness_width, k),
            );
            net.init(&mut params, &mut init_rng("missingness"))?;
            Some(net)
        } else {
            None
        };

        Ok(Self {
            strategy,
            n_labs: k,
            heads,
            encoder,
            survival,
            temporal,
            missingness,
            params,
            stats,
            breslow: None,
        })
    }

    pub fn embedding_dim(&self) -> usize {
        self.encoder
            .as_ref()
            .map_or(self.survival.cfg.input_dim, Encoder::hidden_dim)
    }

    pub(crate) fn check_patients(&self, patients: &[&PreparedPatient]) -> Result<()> {
        for p in patients {
            let ok = match (&p.input, &self.encoder) {
                (ModelInput::Static(v), None) => v.len() == self.survival.cfg.input_dim,
                (ModelInput::Sequence(s), Some(e)) => s.x.first().map_or(0, Vec::len) == e.cfg.input_dim,
                _ => false,
            };
            if !ok {
                return Err(Error::Data(format!(
                    "patient {} was not prepared for strategy {} with {} labs",
                    p.patient_id, self.strategy, self.n_labs
                )));
            }
        }
        Ok(())
    }

    /// Static input rows `[B, in]` as a constant node.
    pub(crate) fn static_inputs(&self, g: &mut Graph, patients: &[&PreparedPatient]) -> Result<NodeId> {
        let width = self.survival.cfg.input_dim;
        let mut data = Vec::with_capacity(patients.len() * width);
        for p in patients {
            data.extend_from_slice(p.input.as_static().expect("checked static input"));
        }
        Ok(g.constant(Tensor::matrix(patients.len(), width, data)?))
    }

    pub(crate) fn sequences<'a>(patients: &[&'a PreparedPatient]) -> Vec<&'a SequenceInput> {
        patients
            .iter()
            .map(|p| p.input.as_sequence().expect("checked sequence input"))
            .collect()
    }

    /// Per-encounter embeddings `[len, d]` of each patient, or the static
    /// input as a single row.
    pub fn embeddings(&self, patients: &[&PreparedPatient], chunk: usize) -> Result<Vec<Tensor>> {
        self.check_patients(patients)?;
        let mut out = Vec::with_capacity(patients.len());
        for part in patients.chunks(chunk.max(1)) {
            let mut g = Graph::new();
            match &self.encoder {
                None => {
                    for p in part {
                        let v = p.input.as_static().expect("checked static input").to_vec();
                        out.push(Tensor::matrix(1, v.len(), v)?);
                    }
                }
                Some(enc) => {
                    let seqs = Self::sequences(part);
                    let e = enc.encode_batch(&mut g, &self.params, &seqs)?;
                    let states = g.value(e.states);
                    let d = enc.hidden_dim();
                    for (b, s) in seqs.iter().enumerate() {
                        let mut rows = Vec::with_capacity(s.len() * d);
                        for t in 0..s.len() {
                            rows.extend_from_slice(states.row(e.row(b, t)));
                        }
                        out.push(Tensor::matrix(s.len(), d, rows)?);
                    }
                }
            }
        }
        Ok(out)
    }

    /// `η` for each patient from its final embedding.
    pub fn log_hazards(&self, patients: &[&PreparedPatient]) -> Result<Vec<f64>> {
        self.check_patients(patients)?;
        let mut out = Vec::with_capacity(patients.len());
        for part in patients.chunks(1024) {
            let mut g = Graph::new();
            let x = match &self.encoder {
                None => self.static_inputs(&mut g, part)?,
                Some(enc) => enc.encode_batch(&mut g, &self.params, &Self::sequences(part))?.last,
            };
            let eta = self.survival.forward(&mut g, &self.params, x)?;
            out.extend_from_slice(g.value(eta).data());
        }
        Ok(out)
    }

    pub fn breslow(&self) -> Result<&BreslowTable> {
        self.breslow
            .as_ref()
            .ok_or_else(|| Error::Config("model has no fitted baseline hazard".into()))
    }

    /// `S(t | patient)` for every patient.
    pub fn survival_at(&self, patients: &[&PreparedPatient], t: f64) -> Result<Vec<f64>> {
        let table = self.breslow()?;
        self.log_hazards(patients)?
            .into_iter()
            .map(|eta| predict_survival(table, eta, t))
            .collect()
    }

    /// Ids of every encoder parameter.
    pub fn encoder_param_ids(&self) -> Vec<String> {
        match &self.encoder {
            None => Vec::new(),
            Some(e) => {
                let prefix = e.param_prefix();
                self.params
                    .iter()
                    .filter(|p| p.id.starts_with(&prefix))
                    .map(|p| p.id.clone())
                    .collect()
            }
        }
    }
}
