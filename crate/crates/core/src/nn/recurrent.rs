//! LSTM, GRU and GRU-D encoders over variable-length sequences.
//!
//! Gate biases are included; setting them to zero gives the bias-free
//! textbook equations. Batches are packed: sequences are sorted by length and
//! at step `t` only the still-active prefix of rows is advanced, so a row's
//! trajectory never depends on other rows or on later steps.

use std::rc::Rc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{AdError, Graph, NodeId, ParamStore, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CellKind {
    Lstm,
    Gru,
    GruD,
}

impl CellKind {
    fn gates(self) -> usize {
        match self {
            CellKind::Lstm => 4,
            CellKind::Gru | CellKind::GruD => 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecurrentConfig {
    pub cell: CellKind,
    /// Per-step feature width. For GRU-D this is the number of labs `K`; the
    /// first layer then consumes `[x̂; m]` of width `2K`.
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub num_layers: usize,
}

impl RecurrentConfig {
    fn validate(&self) -> Result<(), AdError> {
        if self.input_dim == 0 || self.hidden_dim == 0 || self.num_layers == 0 {
            return Err(AdError::Contract(format!(
                "recurrent dimensions must be positive: {self:?}"
            )));
        }
        Ok(())
    }

    fn layer_input_dim(&self, layer: usize) -> usize {
        match (layer, self.cell) {
            (0, CellKind::GruD) => 2 * self.input_dim,
            (0, _) => self.input_dim,
            _ => self.hidden_dim,
        }
    }
}

/// Hidden state after one encounter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingState {
    pub h: Tensor,
    /// LSTM cell state, or the GRU-D last-observed values feeding the decay.
    pub aux: Option<Tensor>,
}

/// Extra per-step channels consumed by GRU-D.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct DecayInputs {
    /// 1 where the lab was measured at this step.
    pub mask: Vec<Vec<f64>>,
    /// Hours since each lab was last measured (since window start if never).
    pub delta: Vec<Vec<f64>>,
    /// Most recent earlier measurement of each lab, or the training mean.
    pub x_last: Vec<Vec<f64>>,
}

/// One patient's encoder input.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SequenceInput {
    pub x: Vec<Vec<f64>>,
    pub decay: Option<DecayInputs>,
}

impl SequenceInput {
    pub fn len(&self) -> usize {
        self.x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }
}

/// Parameter ids of one gated layer.
#[derive(Debug, Clone)]
pub struct CellParams {
    pub w: String,
    pub u: String,
    pub b: String,
}

impl CellParams {
    pub fn new(prefix: &str, layer: usize) -> Self {
        Self {
            w: format!("{prefix}.rnn{layer}.w"),
            u: format!("{prefix}.rnn{layer}.u"),
            b: format!("{prefix}.rnn{layer}.b"),
        }
    }
}

/// Parameter ids of the GRU-D decay terms.
#[derive(Debug, Clone)]
pub struct DecayParams {
    pub x_w: String,
    pub x_b: String,
    pub h_w: String,
    pub h_b: String,
}

impl DecayParams {
    pub fn new(prefix: &str) -> Self {
        Self {
            x_w: format!("{prefix}.decay.x_w"),
            x_b: format!("{prefix}.decay.x_b"),
            h_w: format!("{prefix}.decay.h_w"),
            h_b: format!("{prefix}.decay.h_b"),
        }
    }
}

fn gate_slice(g: &mut Graph, z: NodeId, k: usize, d: usize) -> Result<NodeId, AdError> {
    g.slice(z, 1, k * d, (k + 1) * d)
}

/// `f, i, y` sigmoid gates, `C' = tanh`, `C = f C_prev + i C'`, `h = y tanh(C)`.
pub fn lstm_cell(
    g: &mut Graph,
    store: &ParamStore,
    p: &CellParams,
    x: NodeId,
    h: NodeId,
    c: NodeId,
) -> Result<(NodeId, NodeId), AdError> {
    let d = g.shape(h)[1];
    let w = g.param(store, &p.w)?;
    let u = g.param(store, &p.u)?;
    let b = g.param(store, &p.b)?;
    let xw = g.matmul(x, w)?;
    let hu = g.matmul(h, u)?;
    let z = g.add(xw, hu)?;
    let z = g.add_broadcast(z, b)?;
    let f = gate_slice(g, z, 0, d)?;
    let f = g.sigmoid(f)?;
    let i = gate_slice(g, z, 1, d)?;
    let i = g.sigmoid(i)?;
    let y = gate_slice(g, z, 2, d)?;
    let y = g.sigmoid(y)?;
    let cc = gate_slice(g, z, 3, d)?;
    let cc = g.tanh(cc)?;
    let keep = g.mul(f, c)?;
    let write = g.mul(i, cc)?;
    let c_new = g.add(keep, write)?;
    let tc = g.tanh(c_new)?;
    let h_new = g.mul(y, tc)?;
    Ok((h_new, c_new))
}

/// `z, r` sigmoid gates, `h' = tanh(W x + r (U h) + b)`, `h = (1-z) h + z h'`.
pub fn gru_cell(g: &mut Graph, store: &ParamStore, p: &CellParams, x: NodeId, h: NodeId) -> Result<NodeId, AdError> {
    let d = g.shape(h)[1];
    let w = g.param(store, &p.w)?;
    let u = g.param(store, &p.u)?;
    let b = g.param(store, &p.b)?;
    let xw = g.matmul(x, w)?;
    let xw = g.add_broadcast(xw, b)?;
    let hu = g.matmul(h, u)?;
    let xz = gate_slice(g, xw, 0, d)?;
    let hz = gate_slice(g, hu, 0, d)?;
    let z = g.add(xz, hz)?;
    let z = g.sigmoid(z)?;
    let xr = gate_slice(g, xw, 1, d)?;
    let hr = gate_slice(g, hu, 1, d)?;
    let r = g.add(xr, hr)?;
    let r = g.sigmoid(r)?;
    let xh = gate_slice(g, xw, 2, d)?;
    let hh = gate_slice(g, hu, 2, d)?;
    let rh = g.mul(r, hh)?;
    let cand = g.add(xh, rh)?;
    let cand = g.tanh(cand)?;
    let zc = g.one_minus(z)?;
    let old = g.mul(zc, h)?;
    let new = g.mul(z, cand)?;
    g.add(old, new)
}

/// Decays the input towards `means` and the state towards zero, then runs a
/// GRU step on `[x̂; m]`. `γ = exp(-max(0, w δ + b))`.
#[allow(clippy::too_many_arguments)]
pub fn gru_d_cell(
    g: &mut Graph,
    store: &ParamStore,
    p: &CellParams,
    dp: &DecayParams,
    x: NodeId,
    mask: NodeId,
    delta: NodeId,
    x_last: NodeId,
    means: NodeId,
    h: NodeId,
) -> Result<NodeId, AdError> {
    if let Some(bad) = g.value(delta).data().iter().find(|&&e| e < 0.0) {
        return Err(AdError::Domain {
            op: "gru_d_step",
            detail: format!("negative time delta {bad}"),
        });
    }
    let xw = g.param(store, &dp.x_w)?;
    let xb = g.param(store, &dp.x_b)?;
    let hw = g.param(store, &dp.h_w)?;
    let hb = g.param(store, &dp.h_b)?;

    let gx = g.mul_broadcast(delta, xw)?;
    let gx = g.add_broadcast(gx, xb)?;
    let gx = g.relu(gx)?;
    let gx = g.neg(gx)?;
    let gamma_x = g.exp(gx)?;
    let toward_last = g.mul(gamma_x, x_last)?;
    let gxc = g.one_minus(gamma_x)?;
    let toward_mean = g.mul_broadcast(gxc, means)?;
    let fill = g.add(toward_last, toward_mean)?;
    let observed = g.mul(mask, x)?;
    let mc = g.one_minus(mask)?;
    let filled = g.mul(mc, fill)?;
    let x_hat = g.add(observed, filled)?;

    let gh = g.matmul(delta, hw)?;
    let gh = g.add_broadcast(gh, hb)?;
    let gh = g.relu(gh)?;
    let gh = g.neg(gh)?;
    let gamma_h = g.exp(gh)?;
    let h_dec = g.mul(gamma_h, h)?;

    let inp = g.concat(&[x_hat, mask], 1)?;
    gru_cell(g, store, p, inp, h_dec)
}

fn decay_of(s: &SequenceInput) -> &DecayInputs {
    s.decay.as_ref().expect("decay inputs validated")
}

fn row_tensor(v: &[f64]) -> Result<Tensor, AdError> {
    Tensor::matrix(1, v.len(), v.to_vec())
}

fn state_tensor(g: &Graph, h: NodeId) -> Tensor {
    Tensor::vector(g.value(h).data().to_vec())
}

/// One LSTM step on a single patient. `state` of `None` starts from zeros.
pub fn lstm_step(
    store: &ParamStore,
    p: &CellParams,
    x: &[f64],
    state: Option<&EmbeddingState>,
    hidden_dim: usize,
) -> Result<EmbeddingState, AdError> {
    let mut g = Graph::new();
    let xn = g.constant(row_tensor(x)?);
    let (h0, c0) = match state {
        Some(s) => {
            let c = s
                .aux
                .as_ref()
                .ok_or_else(|| AdError::Contract("LSTM state is missing its cell state".into()))?;
            (row_tensor(s.h.data())?, row_tensor(c.data())?)
        }
        None => (Tensor::zeros(&[1, hidden_dim]), Tensor::zeros(&[1, hidden_dim])),
    };
    let hn = g.constant(h0);
    let cn = g.constant(c0);
    let (h, c) = lstm_cell(&mut g, store, p, xn, hn, cn)?;
    Ok(EmbeddingState {
        h: state_tensor(&g, h),
        aux: Some(state_tensor(&g, c)),
    })
}

/// One GRU step on a single patient.
pub fn gru_step(
    store: &ParamStore,
    p: &CellParams,
    x: &[f64],
    state: Option<&EmbeddingState>,
    hidden_dim: usize,
) -> Result<EmbeddingState, AdError> {
    let mut g = Graph::new();
    let xn = g.constant(row_tensor(x)?);
    let h0 = match state {
        Some(s) => row_tensor(s.h.data())?,
        None => Tensor::zeros(&[1, hidden_dim]),
    };
    let hn = g.constant(h0);
    let h = gru_cell(&mut g, store, p, xn, hn)?;
    Ok(EmbeddingState {
        h: state_tensor(&g, h),
        aux: None,
    })
}

/// Per-step GRU-D channels for a single patient.
#[derive(Debug, Clone, Copy)]
pub struct DecayStep<'a> {
    pub x: &'a [f64],
    pub mask: &'a [f64],
    pub delta: &'a [f64],
    pub x_last: &'a [f64],
}

/// One GRU-D step on a single patient.
pub fn gru_d_step(
    store: &ParamStore,
    p: &CellParams,
    dp: &DecayParams,
    step: DecayStep<'_>,
    state: Option<&EmbeddingState>,
    means: &[f64],
    hidden_dim: usize,
) -> Result<EmbeddingState, AdError> {
    let mut g = Graph::new();
    let x = g.constant(row_tensor(step.x)?);
    let m = g.constant(row_tensor(step.mask)?);
    let d = g.constant(row_tensor(step.delta)?);
    let xl = g.constant(row_tensor(step.x_last)?);
    let mu = g.constant(Tensor::vector(means.to_vec()));
    let h0 = match state {
        Some(s) => row_tensor(s.h.data())?,
        None => Tensor::zeros(&[1, hidden_dim]),
    };
    let hn = g.constant(h0);
    let h = gru_d_cell(&mut g, store, p, dp, x, m, d, xl, mu, hn)?;
    Ok(EmbeddingState {
        h: state_tensor(&g, h),
        aux: Some(Tensor::vector(step.x_last.to_vec())),
    })
}

/// Recurrent encoder producing one embedding per encounter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Encoder {
    pub prefix: String,
    pub cfg: RecurrentConfig,
    /// Training-split lab means that GRU-D decays missing inputs towards.
    #[serde(default)]
    pub empirical_means: Vec<f64>,
}

/// Top-layer states of a packed batch.
#[derive(Debug, Clone)]
pub struct EncodedBatch {
    /// `[Σ lengths, d]`; see [`EncodedBatch::row`] for the row layout.
    pub states: NodeId,
    /// `[batch, d]` state at each sequence's final encounter, in input order.
    pub last: NodeId,
    /// LSTM cell states, same layout as `states`.
    pub cells: Option<NodeId>,
    offsets: Vec<usize>,
    rank: Vec<usize>,
    lengths: Vec<usize>,
}

impl EncodedBatch {
    /// Row of `states` holding the embedding of sequence `b` after step `t`.
    pub fn row(&self, b: usize, t: usize) -> usize {
        debug_assert!(t < self.lengths[b]);
        self.offsets[t] + self.rank[b]
    }

    pub fn lengths(&self) -> &[usize] {
        &self.lengths
    }
}

impl Encoder {
    pub fn new(prefix: impl Into<String>, cfg: RecurrentConfig) -> Result<Self, AdError> {
        cfg.validate()?;
        let empirical_means = match cfg.cell {
            CellKind::GruD => vec![0.0; cfg.input_dim],
            _ => Vec::new(),
        };
        Ok(Self {
            prefix: prefix.into(),
            cfg,
            empirical_means,
        })
    }

    pub fn hidden_dim(&self) -> usize {
        self.cfg.hidden_dim
    }

    pub fn cell_params(&self, layer: usize) -> CellParams {
        CellParams::new(&self.prefix, layer)
    }

    pub fn decay_params(&self) -> DecayParams {
        DecayParams::new(&self.prefix)
    }

    pub fn param_prefix(&self) -> String {
        format!("{}.", self.prefix)
    }

    /// Uniform `±1/sqrt(fan_in)` weights; GRU-D decay terms start at zero.
    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) -> Result<(), AdError> {
        let d = self.cfg.hidden_dim;
        let gd = self.cfg.cell.gates() * d;
        for l in 0..self.cfg.num_layers {
            let p = self.cell_params(l);
            let inp = self.cfg.layer_input_dim(l);
            store.insert_uniform(p.w, &[inp, gd], 1.0 / (inp as f64).sqrt(), rng)?;
            store.insert_uniform(p.u, &[d, gd], 1.0 / (d as f64).sqrt(), rng)?;
            store.insert_uniform(p.b, &[gd], 1.0 / (d as f64).sqrt(), rng)?;
        }
        self.init_decay(store)
    }

    pub fn init_zeros(&self, store: &mut ParamStore) -> Result<(), AdError> {
        let d = self.cfg.hidden_dim;
        let gd = self.cfg.cell.gates() * d;
        for l in 0..self.cfg.num_layers {
            let p = self.cell_params(l);
            let inp = self.cfg.layer_input_dim(l);
            store.insert(p.w, Tensor::zeros(&[inp, gd]))?;
            store.insert(p.u, Tensor::zeros(&[d, gd]))?;
            store.insert(p.b, Tensor::zeros(&[gd]))?;
        }
        self.init_decay(store)
    }

    fn init_decay(&self, store: &mut ParamStore) -> Result<(), AdError> {
        if self.cfg.cell != CellKind::GruD {
            return Ok(());
        }
        let k = self.cfg.input_dim;
        let dp = self.decay_params();
        store.insert(dp.x_w, Tensor::zeros(&[k]))?;
        store.insert(dp.x_b, Tensor::zeros(&[k]))?;
        store.insert(dp.h_w, Tensor::zeros(&[k, self.cfg.hidden_dim]))?;
        store.insert(dp.h_b, Tensor::zeros(&[self.cfg.hidden_dim]))?;
        Ok(())
    }

    fn check_input(&self, s: &SequenceInput) -> Result<(), AdError> {
        if s.is_empty() {
            return Err(AdError::Contract("cannot encode an empty sequence".into()));
        }
        let k = self.cfg.input_dim;
        let bad = |rows: &[Vec<f64>]| rows.len() != s.len() || rows.iter().any(|r| r.len() != k);
        if bad(&s.x) {
            return Err(AdError::ShapeMismatch {
                op: "encode_sequence",
                shapes: vec![vec![s.len(), s.x.first().map_or(0, Vec::len)], vec![s.len(), k]],
            });
        }
        match (&s.decay, self.cfg.cell) {
            (Some(d), CellKind::GruD) => {
                if bad(&d.mask) || bad(&d.delta) || bad(&d.x_last) {
                    return Err(AdError::Contract(
                        "GRU-D mask/delta/last-value channels must match the input shape".into(),
                    ));
                }
            }
            (None, CellKind::GruD) => {
                return Err(AdError::Contract("GRU-D needs decay inputs".into()));
            }
            _ => {}
        }
        Ok(())
    }

    /// Encodes a batch of sequences into one graph.
    pub fn encode_batch(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        batch: &[&SequenceInput],
    ) -> Result<EncodedBatch, AdError> {
        if batch.is_empty() {
            return Err(AdError::Contract("empty batch".into()));
        }
        for s in batch {
            self.check_input(s)?;
        }
        let lengths: Vec<usize> = batch.iter().map(|s| s.len()).collect();
        let mut order: Vec<usize> = (0..batch.len()).collect();
        order.sort_by(|&a, &b| lengths[b].cmp(&lengths[a]));
        let mut rank = vec![0; batch.len()];
        for (r, &b) in order.iter().enumerate() {
            rank[b] = r;
        }
        let t_max = lengths[order[0]];
        let active: Vec<usize> = (0..t_max).map(|t| lengths.iter().filter(|&&l| l > t).count()).collect();

        let d = self.cfg.hidden_dim;
        let k = self.cfg.input_dim;
        let layers = self.cfg.num_layers;
        let cells: Vec<CellParams> = (0..layers).map(|l| self.cell_params(l)).collect();
        let dp = self.decay_params();
        let means = match self.cfg.cell {
            CellKind::GruD => {
                if self.empirical_means.len() != k {
                    return Err(AdError::Contract(format!(
                        "GRU-D needs {k} empirical means, got {}",
                        self.empirical_means.len()
                    )));
                }
                Some(g.constant(Tensor::vector(self.empirical_means.clone())))
            }
            _ => None,
        };

        let n0 = active[0];
        let mut h: Vec<NodeId> = (0..layers).map(|_| g.constant(Tensor::zeros(&[n0, d]))).collect();
        let mut c: Vec<NodeId> = if self.cfg.cell == CellKind::Lstm {
            (0..layers).map(|_| g.constant(Tensor::zeros(&[n0, d]))).collect()
        } else {
            Vec::new()
        };

        let gather = |t: usize, n: usize, pick: &dyn Fn(&SequenceInput) -> &[Vec<f64>]| {
            let mut data = Vec::with_capacity(n * k);
            for &b in &order[..n] {
                data.extend_from_slice(&pick(batch[b])[t]);
            }
            Tensor::matrix(n, k, data)
        };

        let mut tops = Vec::with_capacity(t_max);
        let mut top_cells = Vec::new();
        let mut offsets = Vec::with_capacity(t_max);
        let mut offset = 0;
        for (t, &n) in active.iter().enumerate() {
            offsets.push(offset);
            offset += n;
            let prev = if t == 0 { n0 } else { active[t - 1] };
            if n < prev {
                for l in 0..layers {
                    h[l] = g.slice(h[l], 0, 0, n)?;
                    if let Some(cl) = c.get_mut(l) {
                        *cl = g.slice(*cl, 0, 0, n)?;
                    }
                }
            }
            let mut x = g.constant(gather(t, n, &|s| &s.x)?);
            for l in 0..layers {
                match self.cfg.cell {
                    CellKind::Lstm => {
                        let (hn, cn) = lstm_cell(g, store, &cells[l], x, h[l], c[l])?;
                        h[l] = hn;
                        c[l] = cn;
                    }
                    CellKind::Gru => {
                        h[l] = gru_cell(g, store, &cells[l], x, h[l])?;
                    }
                    CellKind::GruD if l == 0 => {
                        let m = g.constant(gather(t, n, &|s| &decay_of(s).mask)?);
                        let dl = g.constant(gather(t, n, &|s| &decay_of(s).delta)?);
                        let xl = g.constant(gather(t, n, &|s| &decay_of(s).x_last)?);
                        let mu = means.expect("GRU-D means");
                        h[l] = gru_d_cell(g, store, &cells[l], &dp, x, m, dl, xl, mu, h[l])?;
                    }
                    CellKind::GruD => {
                        h[l] = gru_cell(g, store, &cells[l], x, h[l])?;
                    }
                }
                x = h[l];
            }
            tops.push(h[layers - 1]);
            if let Some(&cl) = c.last() {
                top_cells.push(cl);
            }
        }

        let states = g.concat(&tops, 0)?;
        let cells_node = if top_cells.is_empty() {
            None
        } else {
            Some(g.concat(&top_cells, 0)?)
        };
        let last_rows: Rc<[usize]> = (0..batch.len()).map(|b| offsets[lengths[b] - 1] + rank[b]).collect();
        let last = g.gather_rows(states, last_rows)?;
        Ok(EncodedBatch {
            states,
            last,
            cells: cells_node,
            offsets,
            rank,
            lengths,
        })
    }
}

/// Embeddings after every encounter of one sequence, in order.
pub fn encode_sequence(
    encoder: &Encoder,
    store: &ParamStore,
    seq: &SequenceInput,
) -> Result<Vec<EmbeddingState>, AdError> {
    let mut g = Graph::new();
    let enc = encoder.encode_batch(&mut g, store, &[seq])?;
    let states = g.value(enc.states).clone();
    let cells = enc.cells.map(|c| g.value(c).clone());
    Ok((0..seq.len())
        .map(|t| {
            let r = enc.row(0, t);
            let aux = match (&cells, &seq.decay) {
                (Some(c), _) => Some(Tensor::vector(c.row(r).to_vec())),
                (None, Some(dec)) => Some(Tensor::vector(dec.x_last[t].clone())),
                _ => None,
            };
            EmbeddingState {
                h: Tensor::vector(states.row(r).to_vec()),
                aux,
            }
        })
        .collect())
}
