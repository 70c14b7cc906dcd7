//! Multitask training: DWA-balanced combined loss, joint phase, frozen-encoder
//! fine-tuning and random hyperparameter search.

mod model;
mod search;
mod train;

use serde::{Deserialize, Serialize};

use crate::data::Strategy;
use crate::error::{Error, Result};

pub use model::JointModel;
pub use search::{random_search, LeaderboardEntry, SearchResult, SearchSpace};
pub use train::{dataset_losses, train_joint, EpochRecord, LossParts, Phase, TrainHistory};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Head {
    /// Survival outcome.
    S,
    /// Inter-observation times.
    I,
    /// Missingness.
    M,
}

/// Enabled heads; survival is always on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadSet {
    pub temporal: bool,
    pub missingness: bool,
}

impl HeadSet {
    pub const SURVIVAL_ONLY: HeadSet = HeadSet {
        temporal: false,
        missingness: false,
    };

    pub fn for_strategy(s: Strategy) -> Self {
        Self {
            temporal: s.uses_temporal_head(),
            missingness: s.uses_missingness_head(),
        }
    }

    pub fn from_heads(heads: &[Head]) -> Result<Self> {
        if !heads.contains(&Head::S) {
            return Err(Error::Config("the survival head S is mandatory".into()));
        }
        Ok(Self {
            temporal: heads.contains(&Head::I),
            missingness: heads.contains(&Head::M),
        })
    }

    pub fn heads(self) -> Vec<Head> {
        let mut v = vec![Head::S];
        if self.temporal {
            v.push(Head::I);
        }
        if self.missingness {
            v.push(Head::M);
        }
        v
    }

    pub fn n_presence(self) -> usize {
        usize::from(self.temporal) + usize::from(self.missingness)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    /// Balance between the survival loss and the presence losses.
    pub alpha: f64,
    /// DWA temperature.
    pub theta: f64,
    pub max_epochs: usize,
    /// Epochs of joint training; the rest fine-tune each head separately.
    pub joint_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    /// Overrides the heads implied by the strategy.
    pub heads: Option<Vec<Head>>,
    pub val_fraction: f64,
    pub search_draws: usize,
    pub rnn_layers: usize,
    pub hidden_dim: usize,
    pub survival_layers: usize,
    pub survival_width: usize,
    pub temporal_layers: usize,
    pub temporal_width: usize,
    pub missingness_layers: usize,
    pub missingness_width: usize,
    pub clip_norm: Option<f64>,
    /// Add `Λ(h_l, 24 − t_l)` for the open interval after the last encounter.
    pub censored_tail: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            batch_size: 512,
            alpha: 0.1,
            theta: 2.0,
            max_epochs: 1000,
            joint_epochs: 500,
            patience: 10,
            seed: 0,
            heads: None,
            val_fraction: 0.1,
            search_draws: 50,
            rnn_layers: 1,
            hidden_dim: 10,
            survival_layers: 1,
            survival_width: 50,
            temporal_layers: 1,
            temporal_width: 50,
            missingness_layers: 1,
            missingness_width: 50,
            clip_norm: None,
            censored_tail: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return bad(format!("alpha must lie in [0, 1], got {}", self.alpha));
        }
        if !(self.theta > 0.0) {
            return bad(format!("theta must be positive, got {}", self.theta));
        }
        if self.joint_epochs > self.max_epochs {
            return bad(format!(
                "joint_epochs ({}) exceeds max_epochs ({})",
                self.joint_epochs, self.max_epochs
            ));
        }
        if self.patience == 0 {
            return bad("patience must be at least 1".into());
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return bad(format!("val_fraction must lie in (0, 1), got {}", self.val_fraction));
        }
        if self.rnn_layers == 0 || self.hidden_dim == 0 {
            return bad("rnn_layers and hidden_dim must be positive".into());
        }
        let widths = [self.survival_width, self.temporal_width, self.missingness_width];
        if widths.contains(&0) {
            return bad("head widths must be positive".into());
        }
        if let Some(h) = &self.heads {
            HeadSet::from_heads(h)?;
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                return bad(format!("clip_norm must be positive, got {c}"));
            }
        }
        Ok(())
    }

    pub fn head_set(&self, strategy: Strategy) -> Result<HeadSet> {
        match &self.heads {
            None => Ok(HeadSet::for_strategy(strategy)),
            Some(h) => {
                let set = HeadSet::from_heads(h)?;
                if strategy.is_static() && set.n_presence() > 0 {
                    return Err(Error::Config(format!(
                        "strategy {strategy} has no encoder to share with presence heads"
                    )));
                }
                Ok(set)
            }
        }
    }
}

/// Epoch-average presence losses from which DWA weights are derived.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DwaState {
    /// `[L_I, L_M]` per completed epoch.
    pub history: Vec<[f64; 2]>,
}

impl DwaState {
    pub fn record(&mut self, losses: [f64; 2]) {
        self.history.push(losses);
    }

    /// `[w_I, w_M]` for the next epoch.
    pub fn weights(&self, theta: f64, heads: HeadSet) -> [f64; 2] {
        match (heads.temporal, heads.missingness) {
            (true, true) => {}
            (t, m) => return [f64::from(u8::from(t)), f64::from(u8::from(m))],
        }
        let s = self.history.len();
        if s < 2 {
            return [1.0, 1.0];
        }
        let (prev, prev2) = (self.history[s - 1], self.history[s - 2]);
        if prev.iter().chain(&prev2).any(|&l| !(l > 0.0)) {
            log::warn!("non-positive presence loss in DWA history; using equal weights");
            return [1.0, 1.0];
        }
        dwa_weights([prev[0] / prev2[0], prev[1] / prev2[1]], theta)
    }
}

/// `2 · softmax(r / θ)` from per-task descent ratios `r`.
pub fn dwa_weights(ratios: [f64; 2], theta: f64) -> [f64; 2] {
    let a = ratios[0] / theta;
    let b = ratios[1] / theta;
    let m = a.max(b);
    let (ea, eb) = ((a - m).exp(), (b - m).exp());
    let wi = 2.0 * ea / (ea + eb);
    [wi, 2.0 - wi]
}

/// `(1 − α)·l_S + α·Σ w·l` over the enabled presence tasks.
pub fn combined_loss(l_s: f64, l_i: Option<f64>, l_m: Option<f64>, weights: [f64; 2], alpha: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Config(format!("alpha must lie in [0, 1], got {alpha}")));
    }
    if alpha == 0.0 || (l_i.is_none() && l_m.is_none()) {
        return Ok(l_s);
    }
    let presence = l_i.map_or(0.0, |l| weights[0] * l) + l_m.map_or(0.0, |l| weights[1] * l);
    Ok((1.0 - alpha) * l_s + alpha * presence)
}

#[cfg(test)]
mod tests;
