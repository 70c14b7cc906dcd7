use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use super::{train_joint, JointModel, TrainConfig};
use crate::data::{PreparedDataset, PreparedPatient};
use crate::error::{Error, Result};
use crate::metrics::cindex_integrated;
use crate::seed;
use crate::survival::predict_survival;

/// Finite grid of hyperparameter values; every combination is a candidate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SearchSpace {
    pub lr: Vec<f64>,
    pub batch_size: Vec<usize>,
    pub alpha: Vec<f64>,
    pub rnn_layers: Vec<usize>,
    pub hidden_dim: Vec<usize>,
    /// Depths explored for every head.
    pub head_layers: Vec<usize>,
    pub head_width: Vec<usize>,
}

impl Default for SearchSpace {
    fn default() -> Self {
        Self {
            lr: vec![1e-3, 1e-4],
            batch_size: vec![512, 1024],
            alpha: vec![0.1, 0.3],
            rnn_layers: vec![1, 2],
            hidden_dim: vec![10, 25],
            head_layers: vec![0, 1, 2, 3],
            head_width: vec![50],
        }
    }
}

impl SearchSpace {
    fn dims(&self) -> [usize; 9] {
        [
            self.lr.len(),
            self.batch_size.len(),
            self.alpha.len(),
            self.rnn_layers.len(),
            self.hidden_dim.len(),
            self.head_layers.len(),
            self.head_layers.len(),
            self.head_layers.len(),
            self.head_width.len(),
        ]
    }

    pub fn size(&self) -> usize {
        self.dims().iter().product()
    }

    /// The `i`-th grid point applied on top of `base`.
    pub fn config(&self, base: &TrainConfig, mut i: usize) -> TrainConfig {
        let mut pick = |n: usize| {
            let k = i % n;
            i /= n;
            k
        };
        let d = self.dims();
        let mut c = base.clone();
        c.lr = self.lr[pick(d[0])];
        c.batch_size = self.batch_size[pick(d[1])];
        c.alpha = self.alpha[pick(d[2])];
        c.rnn_layers = self.rnn_layers[pick(d[3])];
        c.hidden_dim = self.hidden_dim[pick(d[4])];
        c.survival_layers = self.head_layers[pick(d[5])];
        c.temporal_layers = self.head_layers[pick(d[6])];
        c.missingness_layers = self.head_layers[pick(d[7])];
        let w = self.head_width[pick(d[8])];
        c.survival_width = w;
        c.temporal_width = w;
        c.missingness_width = w;
        c
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LeaderboardEntry {
    pub grid_index: usize,
    pub config: TrainConfig,
    /// Integrated C-index on the validation split.
    pub val_cindex: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchResult {
    pub best: TrainConfig,
    /// Sorted best first; ties keep draw order.
    pub leaderboard: Vec<LeaderboardEntry>,
}

fn validation_cindex(model: &JointModel, val: &PreparedDataset) -> Result<f64> {
    let patients: Vec<&PreparedPatient> = val.patients.iter().collect();
    let eta = model.log_hazards(&patients)?;
    let table = model.breslow()?;
    let labels = val.labels();
    let max_t = labels.iter().map(|l| l.time).fold(0.0, f64::max);
    cindex_integrated(
        |i, t| predict_survival(table, eta[i], t).unwrap_or(f64::NAN),
        &labels,
        max_t,
    )
}

/// Trains `draws` distinct grid points (all of them if the grid is smaller)
/// and ranks them by validation integrated C-index. Every draw trains with
/// the seed of `base`, so only the hyperparameters differ.
pub fn random_search(
    space: &SearchSpace,
    base: &TrainConfig,
    train: &PreparedDataset,
    val: &PreparedDataset,
    draws: usize,
    seed: u64,
) -> Result<SearchResult> {
    let size = space.size();
    if size == 0 {
        return Err(Error::Config("search space is empty".into()));
    }
    if draws == 0 {
        return Err(Error::Config("search needs at least one draw".into()));
    }
    let picks = sample(&mut seed::rng(seed, &["search"]), size, draws.min(size)).into_vec();
    let mut leaderboard = Vec::with_capacity(picks.len());
    for (k, &i) in picks.iter().enumerate() {
        let cfg = space.config(base, i);
        let mut model = JointModel::new(train.strategy, train.stats.clone(), &cfg)?;
        train_joint(&mut model, train, val, &cfg)?;
        let val_cindex = validation_cindex(&model, val)?;
        log::info!("search draw {k}: grid point {i}, validation C-index {val_cindex:.4}");
        leaderboard.push(LeaderboardEntry {
            grid_index: i,
            config: cfg,
            val_cindex,
        });
    }
    leaderboard.sort_by(|a, b| b.val_cindex.total_cmp(&a.val_cindex));
    Ok(SearchResult {
        best: leaderboard[0].config.clone(),
        leaderboard,
    })
}
