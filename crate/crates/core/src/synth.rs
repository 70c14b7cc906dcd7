//! Synthetic cohorts in which one latent health process drives the
//! observation times, the missingness masks and the outcome.
//!
//! Every random quantity comes from its own stream keyed by
//! `(seed, purpose, patient)`. The regime shift only changes the observation
//! rate and mask logits, so a patient generated under regime A or B shares
//! its latent path, lab noise draws and survival outcome.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{EncounterSequence, Regime, WINDOW_HOURS};
use crate::error::{Error, Result};
use crate::metrics::cindex_td;
use crate::seed;
use crate::survival::SurvivalLabel;

pub const TRUTH_FORMAT: &str = "jointsurv-truth/1";

/// Latent grid resolution in hours.
const DT: f64 = 0.1;
const STEPS: usize = (WINDOW_HOURS / DT) as usize;
const CALIBRATION_PATIENTS: usize = 2000;
const MAX_REDRAWS: usize = 1000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorConfig {
    pub n_patients: usize,
    /// Share of patients in regime B.
    pub regime_b_fraction: f64,
    pub n_labs: usize,
    pub latent_dim: usize,
    /// Mean-reversion rate of the latent process, per hour.
    pub latent_reversion: f64,
    pub latent_volatility: f64,
    /// Spread of the per-patient latent level.
    pub latent_spread: f64,
    /// Weights mapping the latent state to severity; defaults to the first
    /// coordinate.
    pub severity_weights: Option<Vec<f64>>,
    /// Observation base rate, per hour.
    pub rho: f64,
    /// Gain of severity on observation intensity and mask logits.
    pub kappa: f64,
    pub beta: Vec<f64>,
    pub delta_rho: f64,
    pub delta_beta: Vec<f64>,
    /// Log-risk weights on the latent state at the end of the window.
    pub risk_weights: Vec<f64>,
    pub weibull_scale_days: f64,
    pub weibull_shape: f64,
    /// Target fraction of censored patients.
    pub censoring_rate: f64,
    pub follow_up_days: f64,
    pub noise_std: f64,
    /// Survival time fixed at the median given the risk.
    pub noiseless_survival: bool,
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            n_patients: 4000,
            regime_b_fraction: 0.5,
            n_labs: 5,
            latent_dim: 2,
            latent_reversion: 0.2,
            latent_volatility: 0.4,
            latent_spread: 1.0,
            severity_weights: None,
            rho: 0.5,
            kappa: 0.8,
            beta: vec![0.5, 0.0, -0.5, 1.0, -1.0],
            delta_rho: -0.25,
            delta_beta: vec![-1.0, 0.5, -1.0, -1.0, 0.5],
            risk_weights: vec![0.8, 0.4],
            weibull_scale_days: 30.0,
            weibull_shape: 1.0,
            censoring_rate: 0.3,
            follow_up_days: 60.0,
            noise_std: 1.0,
            noiseless_survival: false,
            seed: 0,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n_patients == 0 {
            return bad("n_patients must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.regime_b_fraction) {
            return bad(format!(
                "regime_b_fraction must lie in [0, 1], got {}",
                self.regime_b_fraction
            ));
        }
        if self.n_labs == 0 || self.latent_dim == 0 {
            return bad("n_labs and latent_dim must be positive".into());
        }
        if self.beta.len() != self.n_labs || self.delta_beta.len() != self.n_labs {
            return bad(format!(
                "beta and delta_beta need {} entries (one per lab), got {} and {}",
                self.n_labs,
                self.beta.len(),
                self.delta_beta.len()
            ));
        }
        if self.risk_weights.len() != self.latent_dim {
            return bad(format!(
                "risk_weights needs {} entries (one per latent coordinate)",
                self.latent_dim
            ));
        }
        if let Some(w) = &self.severity_weights {
            if w.len() != self.latent_dim {
                return bad(format!("severity_weights needs {} entries", self.latent_dim));
            }
        }
        if !(self.rho > 0.0) || !(self.rho + self.delta_rho > 0.0) {
            return bad(format!(
                "observation rates must be positive: rho = {}, rho + delta_rho = {}",
                self.rho,
                self.rho + self.delta_rho
            ));
        }
        if !(0.0..1.0).contains(&self.censoring_rate) {
            return bad(format!(
                "censoring_rate must lie in [0, 1), got {}",
                self.censoring_rate
            ));
        }
        let positive = [
            ("latent_reversion", self.latent_reversion),
            ("weibull_scale_days", self.weibull_scale_days),
            ("weibull_shape", self.weibull_shape),
            ("follow_up_days", self.follow_up_days),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("{name} must be positive, got {v}"));
            }
        }
        let non_negative = [
            ("latent_volatility", self.latent_volatility),
            ("latent_spread", self.latent_spread),
            ("noise_std", self.noise_std),
        ];
        for (name, v) in non_negative {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be non-negative, got {v}"));
            }
        }
        for rho in [self.rho, self.rho + self.delta_rho] {
            let expected = self.expected_encounters(rho);
            if expected < 1.0 {
                return bad(format!(
                    "expected encounters per window is {expected:.3} (< 1) at rate {rho}/h; \
                     raise rho or kappa"
                ));
            }
            if expected > 1000.0 {
                return bad(format!(
                    "expected encounters per window is {expected:.0}; lower rho or kappa"
                ));
            }
        }
        Ok(())
    }

    fn severity_weights(&self) -> Vec<f64> {
        self.severity_weights.clone().unwrap_or_else(|| {
            let mut w = vec![0.0; self.latent_dim];
            w[0] = 1.0;
            w
        })
    }

    /// Stationary mean count `ρ·T·E[exp(κ·s)]` for Gaussian severity.
    fn expected_encounters(&self, rho: f64) -> f64 {
        let var_coord = self.latent_spread.powi(2) + self.latent_volatility.powi(2) / (2.0 * self.latent_reversion);
        let w2: f64 = self.severity_weights().iter().map(|w| w * w).sum();
        rho * WINDOW_HOURS * (0.5 * self.kappa * self.kappa * var_coord * w2).exp()
    }

    fn regime_params(&self, r: Regime) -> (f64, Vec<f64>) {
        match r {
            Regime::A => (self.rho, self.beta.clone()),
            Regime::B => (
                self.rho + self.delta_rho,
                self.beta.iter().zip(&self.delta_beta).map(|(b, d)| b + d).collect(),
            ),
        }
    }

    pub fn regime_of(&self, index: usize) -> Regime {
        let n_b = (self.n_patients as f64 * self.regime_b_fraction).round() as usize;
        if index < self.n_patients - n_b {
            Regime::A
        } else {
            Regime::B
        }
    }
}

/// Per-patient quantities that are never shown to a model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatientTruth {
    pub patient_id: String,
    /// Latent state at each hour `0..=24`.
    pub latent_hourly: Vec<Vec<f64>>,
    /// True log-risk.
    pub risk: f64,
    /// Observation intensity (per hour) at each encounter.
    pub intensities: Vec<f64>,
    pub event_time_days: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub format: String,
    pub config: GeneratorConfig,
    /// Exponential censoring rate per day chosen to meet the target.
    pub censoring_hazard: f64,
    /// Lab loadings on the latent state, `[K][D]`.
    pub loadings: Vec<Vec<f64>>,
    pub offsets: Vec<f64>,
    pub patients: Vec<PatientTruth>,
}

/// Quantities shared by every patient of one configuration.
#[derive(Debug, Clone)]
pub struct Structure {
    pub loadings: Vec<Vec<f64>>,
    pub offsets: Vec<f64>,
    pub scales: Vec<f64>,
    pub censoring_hazard: f64,
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn exp1(rng: &mut ChaCha8Rng) -> f64 {
    Exp1.sample(rng)
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Latent path on the `DT` grid, `STEPS + 1` points.
fn latent_path(cfg: &GeneratorConfig, index: usize) -> Vec<Vec<f64>> {
    let mut rng = seed::rng(cfg.seed, &["latent", &index.to_string()]);
    let d = cfg.latent_dim;
    let level: Vec<f64> = (0..d).map(|_| cfg.latent_spread * normal(&mut rng)).collect();
    let a = (-cfg.latent_reversion * DT).exp();
    let stationary = cfg.latent_volatility / (2.0 * cfg.latent_reversion).sqrt();
    let step_sd = stationary * (1.0 - a * a).sqrt();
    let mut z: Vec<f64> = level.iter().map(|m| m + stationary * normal(&mut rng)).collect();
    let mut path = Vec::with_capacity(STEPS + 1);
    path.push(z.clone());
    for _ in 0..STEPS {
        for k in 0..d {
            z[k] = level[k] + a * (z[k] - level[k]) + step_sd * normal(&mut rng);
        }
        path.push(z.clone());
    }
    path
}

fn risk_of(cfg: &GeneratorConfig, path: &[Vec<f64>]) -> f64 {
    dot(&cfg.risk_weights, &path[STEPS])
}

/// Event time in days under a Weibull proportional-hazards model.
fn event_time(cfg: &GeneratorConfig, index: usize, risk: f64) -> f64 {
    let e = if cfg.noiseless_survival {
        std::f64::consts::LN_2
    } else {
        exp1(&mut seed::rng(cfg.seed, &["survival", &index.to_string()]))
    };
    cfg.weibull_scale_days * (e * (-risk).exp()).powf(1.0 / cfg.weibull_shape)
}

/// `P(min(C, F) < T)` for exponential censoring at rate `mu`.
fn censored_fraction(times: &[f64], mu: f64, follow_up: f64) -> f64 {
    times
        .iter()
        .map(|&t| if t > follow_up { 1.0 } else { 1.0 - (-mu * t).exp() })
        .sum::<f64>()
        / times.len() as f64
}

pub fn structure(cfg: &GeneratorConfig) -> Result<Structure> {
    cfg.validate()?;
    let mut rng = seed::rng(cfg.seed, &["structure"]);
    let loadings = (0..cfg.n_labs)
        .map(|_| (0..cfg.latent_dim).map(|_| normal(&mut rng)).collect())
        .collect();
    let offsets = (0..cfg.n_labs)
        .map(|k| 10.0 * k as f64 + rng.random_range(-2.0..2.0))
        .collect();
    let scales = (0..cfg.n_labs).map(|_| rng.random_range(0.5..3.0)).collect();

    // Calibration cohort on its own seed path.
    let mut cal = cfg.clone();
    cal.seed = seed::derive(cfg.seed, &["censoring-calibration"]);
    let times: Vec<f64> = (0..CALIBRATION_PATIENTS)
        .map(|i| event_time(&cal, i, risk_of(&cal, &latent_path(&cal, i))))
        .collect();
    let admin = censored_fraction(&times, 0.0, cfg.follow_up_days);
    let censoring_hazard = if admin >= cfg.censoring_rate {
        if cfg.censoring_rate > 0.0 || admin > 0.0 {
            log::warn!(
                "follow-up alone censors {:.3} of patients (target {:.3})",
                admin,
                cfg.censoring_rate
            );
        }
        0.0
    } else {
        let (mut lo, mut hi) = (0.0, 1.0);
        while censored_fraction(&times, hi, cfg.follow_up_days) < cfg.censoring_rate {
            hi *= 2.0;
        }
        for _ in 0..100 {
            let mid = 0.5 * (lo + hi);
            if censored_fraction(&times, mid, cfg.follow_up_days) < cfg.censoring_rate {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    };
    Ok(Structure {
        loadings,
        offsets,
        scales,
        censoring_hazard,
    })
}

/// Encounter times by time-rescaling of the piecewise-constant intensity
/// `ρ·exp(κ·severity(z))` on the latent grid.
fn observation_times(cfg: &GeneratorConfig, index: usize, rho: f64, severity: &[f64]) -> Result<Vec<f64>> {
    let mut rng = seed::rng(cfg.seed, &["observation", &index.to_string()]);
    for _ in 0..MAX_REDRAWS {
        let mut times = Vec::new();
        let mut target = exp1(&mut rng);
        let mut acc = 0.0;
        for (cell, s) in severity[..STEPS].iter().enumerate() {
            let rate = rho * (cfg.kappa * s).exp();
            let start = cell as f64 * DT;
            while acc + rate * DT >= target {
                let t = start + (target - acc) / rate;
                if times.last().is_none_or(|&p: &f64| t > p) && t <= WINDOW_HOURS {
                    times.push(t);
                }
                target += exp1(&mut rng);
            }
            acc += rate * DT;
        }
        if !times.is_empty() {
            return Ok(times);
        }
    }
    Err(Error::Config(format!(
        "patient {index}: no encounter after {MAX_REDRAWS} draws; raise rho"
    )))
}

fn cell_of(t: f64) -> usize {
    ((t / DT) as usize).min(STEPS - 1)
}

/// One patient under `regime`. The result depends on `regime` only through
/// encounter times, masks and the lab values read at those times.
pub fn generate_patient(
    cfg: &GeneratorConfig,
    st: &Structure,
    index: usize,
    regime: Regime,
) -> Result<(EncounterSequence, PatientTruth)> {
    let id = index.to_string();
    let path = latent_path(cfg, index);
    let sev_w = cfg.severity_weights();
    let severity: Vec<f64> = path.iter().map(|z| dot(&sev_w, z)).collect();
    let (rho, beta) = cfg.regime_params(regime);
    let times = observation_times(cfg, index, rho, &severity)?;

    let mut mask_rng = seed::rng(cfg.seed, &["mask", &id]);
    let mut noise_rng = seed::rng(cfg.seed, &["noise", &id]);
    let mut values = Vec::with_capacity(times.len());
    let mut mask = Vec::with_capacity(times.len());
    let mut intensities = Vec::with_capacity(times.len());
    for &t in &times {
        let c = cell_of(t);
        let s = severity[c];
        intensities.push(rho * (cfg.kappa * s).exp());
        let m: Vec<bool> = beta
            .iter()
            .map(|b| mask_rng.random::<f64>() < sigmoid(b + cfg.kappa * s))
            .collect();
        let v: Vec<f64> = (0..cfg.n_labs)
            .map(|k| {
                let clean = dot(&st.loadings[k], &path[c]) + cfg.noise_std * normal(&mut noise_rng);
                st.offsets[k] + st.scales[k] * clean
            })
            .collect();
        values.push(v);
        mask.push(m);
    }

    let risk = risk_of(cfg, &path);
    let t_event = event_time(cfg, index, risk);
    let t_cens = if st.censoring_hazard > 0.0 {
        exp1(&mut seed::rng(cfg.seed, &["censoring", &id])) / st.censoring_hazard
    } else {
        f64::INFINITY
    };
    let t_obs = t_event.min(t_cens).min(cfg.follow_up_days);
    let label = SurvivalLabel::new(t_obs.max(1e-6), t_event <= t_cens && t_event <= cfg.follow_up_days)?;

    let patient_id = format!("p{index:05}");
    let seq = EncounterSequence {
        patient_id: patient_id.clone(),
        times,
        values,
        mask,
        label,
        regime,
    };
    seq.validate()?;
    let latent_hourly = path.iter().step_by((1.0 / DT).round() as usize).cloned().collect();
    let truth = PatientTruth {
        patient_id,
        latent_hourly,
        risk,
        intensities,
        event_time_days: t_event,
    };
    Ok((seq, truth))
}

pub fn generate(cfg: &GeneratorConfig) -> Result<(Vec<EncounterSequence>, GroundTruth)> {
    let st = structure(cfg)?;
    let mut cohort = Vec::with_capacity(cfg.n_patients);
    let mut patients = Vec::with_capacity(cfg.n_patients);
    for i in 0..cfg.n_patients {
        let (s, t) = generate_patient(cfg, &st, i, cfg.regime_of(i))?;
        cohort.push(s);
        patients.push(t);
    }
    let truth = GroundTruth {
        format: TRUTH_FORMAT.into(),
        config: cfg.clone(),
        censoring_hazard: st.censoring_hazard,
        loadings: st.loadings,
        offsets: st.offsets,
        patients,
    };
    Ok((cohort, truth))
}

/// Horizon concordance of the true risk score.
pub fn oracle_cindex(cohort: &[EncounterSequence], truth: &GroundTruth, horizon: f64) -> Result<f64> {
    let by_id: std::collections::HashMap<&str, f64> =
        truth.patients.iter().map(|p| (p.patient_id.as_str(), p.risk)).collect();
    let risk = cohort
        .iter()
        .map(|s| {
            by_id
                .get(s.patient_id.as_str())
                .copied()
                .ok_or_else(|| Error::Data(format!("no ground truth for patient {}", s.patient_id)))
        })
        .collect::<Result<Vec<_>>>()?;
    let labels: Vec<_> = cohort.iter().map(|s| s.label).collect();
    cindex_td(&risk, &labels, horizon)
}

pub fn write_truth(path: &Path, truth: &GroundTruth) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    serde_json::to_writer(&mut w, truth).map_err(|e| Error::Data(e.to_string()))?;
    writeln!(w).and_then(|_| w.flush()).map_err(|e| Error::io(path, e))
}

pub fn read_truth(path: &Path) -> Result<GroundTruth> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut line = String::new();
    BufReader::new(f).read_line(&mut line).map_err(|e| Error::io(path, e))?;
    let t: GroundTruth = serde_json::from_str(&line).map_err(|e| Error::Parse {
        line: 1,
        msg: e.to_string(),
    })?;
    if t.format != TRUTH_FORMAT {
        return Err(Error::Data(format!(
            "unsupported ground-truth format `{}`, expected `{TRUTH_FORMAT}`",
            t.format
        )));
    }
    Ok(t)
}
