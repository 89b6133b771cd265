//! BIC comparison of the one-compartment and exposed-infected models.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::baum_welch::{chain_limit_moments, fit, FitConfig};
use crate::error::Result;
use crate::lbdi::{invert_lbdi_moments, lbdi_fit, LbdiMoments, LbdiParams};
use crate::moments::{invert_moments, LimitMoments};
use crate::params::{EiState, ModelParams};
use crate::rng::derive_seed;
use crate::sim::{simulate_skeleton_path, ObservationSeries};

/// `k ln T - 2 log L`.
pub fn bic(log_lik: f64, k: usize, t_obs: usize) -> f64 {
    assert!(t_obs >= 1, "BIC needs at least one observation");
    k as f64 * (t_obs as f64).ln() - 2.0 * log_lik
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelId {
    /// Birth-death with immigration, three rates.
    Lbdi,
    /// Exposed-infected, four rates.
    ExposedInfected,
}

impl ModelId {
    pub fn parameter_count(self) -> usize {
        match self {
            ModelId::Lbdi => 3,
            ModelId::ExposedInfected => 4,
        }
    }

    pub fn number(self) -> u8 {
        match self {
            ModelId::Lbdi => 1,
            ModelId::ExposedInfected => 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSummary {
    pub model: ModelId,
    pub k: usize,
    pub t_obs: usize,
    pub log_likelihood: Option<f64>,
    pub bic: Option<f64>,
    /// Recovered rates; `alpha` is absent for the one-compartment model.
    pub lambda: Option<f64>,
    pub mu: Option<f64>,
    pub alpha: Option<f64>,
    pub nu: Option<f64>,
    pub error: Option<String>,
}

impl ModelSummary {
    fn new(model: ModelId, t_obs: usize) -> Self {
        Self {
            model,
            k: model.parameter_count(),
            t_obs,
            log_likelihood: None,
            bic: None,
            lambda: None,
            mu: None,
            alpha: None,
            nu: None,
            error: None,
        }
    }

    fn with_fit(mut self, ll: f64) -> Self {
        self.log_likelihood = Some(ll);
        self.bic = Some(bic(ll, self.k, self.t_obs));
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionReport {
    pub models: Vec<ModelSummary>,
    /// Model with the strictly smaller BIC; absent on ties or failures.
    pub winner: Option<ModelId>,
    pub tie: bool,
}

impl SelectionReport {
    pub fn from_summaries(models: Vec<ModelSummary>) -> Self {
        let (a, b) = (&models[0], &models[1]);
        let (winner, tie) = match (a.bic, b.bic) {
            (Some(x), Some(y)) if x < y => (Some(a.model), false),
            (Some(x), Some(y)) if y < x => (Some(b.model), false),
            (Some(_), Some(_)) => (None, true),
            _ => (None, false),
        };
        Self { models, winner, tie }
    }

    pub fn get(&self, model: ModelId) -> Option<&ModelSummary> {
        self.models.iter().find(|m| m.model == model)
    }
}

fn lbdi_arm(obs: &ObservationSeries, cfg: &FitConfig, chain_steps: usize, seed: u64) -> ModelSummary {
    let mut s = ModelSummary::new(ModelId::Lbdi, obs.len());
    let fit = match lbdi_fit(obs, cfg) {
        Ok(f) => f,
        Err(e) => {
            s.error = Some(format!("fit: {e}"));
            return s;
        }
    };
    s = s.with_fit(fit.log_likelihood);
    let recovered = chain_limit_moments(&fit.model, cfg.dt, chain_steps, seed).and_then(|cm| {
        invert_lbdi_moments(&LbdiMoments { i_star: cm.i.mean, i2_star: cm.ii.mean, n_star: cm.n_rate.map_or(0.0, |n| n.mean) })
    });
    match recovered {
        Ok(LbdiParams { lambda, mu, nu }) => {
            s.lambda = Some(lambda);
            s.mu = Some(mu);
            s.nu = Some(nu);
        }
        Err(e) => s.error = Some(format!("moments: {e}")),
    }
    s
}

fn exposed_arm(obs: &ObservationSeries, cfg: &FitConfig, chain_steps: usize, seed: u64) -> ModelSummary {
    let mut s = ModelSummary::new(ModelId::ExposedInfected, obs.len());
    let fit = match fit(obs, cfg) {
        Ok(f) => f,
        Err(e) => {
            s.error = Some(format!("fit: {e}"));
            return s;
        }
    };
    s = s.with_fit(fit.log_likelihood);
    let recovered = chain_limit_moments(&fit.model, cfg.dt, chain_steps, seed).and_then(|cm| {
        invert_moments(&LimitMoments::new(cm.e.mean, cm.i.mean, cm.ei.mean, cm.n_rate.map_or(0.0, |n| n.mean)))
    });
    match recovered {
        Ok(p) => {
            s.lambda = Some(p.lambda);
            s.mu = Some(p.mu);
            s.alpha = Some(p.alpha);
            s.nu = Some(p.nu);
        }
        Err(e) => s.error = Some(format!("moments: {e}")),
    }
    s
}

/// Fits both models to the same series and compares their BIC.
pub fn compare(obs: &ObservationSeries, cfg: &FitConfig, chain_steps: usize, seed: u64) -> SelectionReport {
    let (m1, m2) = rayon::join(
        || lbdi_arm(obs, cfg, chain_steps, derive_seed(seed, 1)),
        || exposed_arm(obs, cfg, chain_steps, derive_seed(seed, 2)),
    );
    SelectionReport::from_summaries(vec![m1, m2])
}

/// Model that generates the data of a selection experiment.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "model", rename_all = "snake_case")]
pub enum Truth {
    Lbdi(LbdiParams),
    ExposedInfected(ModelParams),
}

impl Truth {
    pub fn observe(&self, horizon: f64, dt: f64, seed: u64) -> Result<ObservationSeries> {
        let path = match self {
            Truth::Lbdi(p) => simulate_skeleton_path(p, EiState::ORIGIN, horizon, dt, seed)?,
            Truth::ExposedInfected(p) => simulate_skeleton_path(p, EiState::ORIGIN, horizon, dt, seed)?,
        };
        Ok(path.observations)
    }
}

/// Repeats simulate-then-compare with derived seeds.
pub fn replicate_selection(
    truth: &Truth,
    horizon: f64,
    cfg: &FitConfig,
    replications: usize,
    chain_steps: usize,
    seed: u64,
) -> Result<Vec<SelectionReport>> {
    (0..replications as u64)
        .map(|r| {
            let obs = truth.observe(horizon, cfg.dt, derive_seed(seed, 100 + r))?;
            let rep_cfg = FitConfig { seed: derive_seed(seed, 200 + r), ..cfg.clone() };
            Ok(compare(&obs, &rep_cfg, chain_steps, derive_seed(seed, 300 + r)))
        })
        .collect()
}

/// One CSV row per model per replication.
pub fn write_selection_csv<W: Write>(reports: &[SelectionReport], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["replication", "model", "lambda", "mu", "alpha", "nu", "log_lik", "bic", "winner"])?;
    let opt = |x: Option<f64>| x.map_or(String::new(), |v| v.to_string());
    for (r, rep) in reports.iter().enumerate() {
        let winner = rep.winner.map_or(if rep.tie { "tie".to_string() } else { String::new() }, |m| m.number().to_string());
        for m in &rep.models {
            out.write_record([
                r.to_string(),
                m.model.number().to_string(),
                opt(m.lambda),
                opt(m.mu),
                opt(m.alpha),
                opt(m.nu),
                opt(m.log_likelihood),
                opt(m.bic),
                winner.clone(),
            ])?;
        }
    }
    out.flush()?;
    Ok(())
}
