//! Expectation-maximization for the triple HMM, constrained to transition
//! matrices that come from a skeleton, plus the multi-start fitting driver
//! and the moment-based parameter recovery that follows it.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hmm::{backward_into, build_hmm, emission_columns, forward_pass, log_likelihood, HmmModel};
use crate::lattice::Lattice;
use crate::moments::{invert_moments, LimitMoments};
use crate::params::{EiState, ModelParams, TruncationConfig};
use crate::rng::{derive_seed, replica_rng, SimRng};
use crate::sim::ObservationSeries;
use crate::skeleton::{estimate_skeleton_dynamics, simulate_skeleton, ChainMoments, SkeletonEstimate, SkeletonMatrix, SkeletonSampling};

pub const DEFAULT_BURN_IN: usize = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ParamRange {
    pub lower: f64,
    pub upper: f64,
}

impl ParamRange {
    pub const fn new(lower: f64, upper: f64) -> Self {
        Self { lower, upper }
    }

    fn draw(&self, rng: &mut SimRng) -> f64 {
        if self.lower == self.upper {
            self.lower
        } else {
            rng.random_range(self.lower..self.upper)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InitRanges {
    pub lambda: ParamRange,
    pub mu: ParamRange,
    pub alpha: ParamRange,
    pub nu: ParamRange,
}

impl Default for InitRanges {
    fn default() -> Self {
        Self {
            lambda: ParamRange::new(0.04, 0.07),
            mu: ParamRange::new(0.185, 0.25),
            alpha: ParamRange::new(0.09, 0.13),
            nu: ParamRange::new(0.013, 0.02),
        }
    }
}

impl InitRanges {
    /// Uniform independent draw of `(lambda, mu, alpha, nu)`.
    pub fn draw(&self, rng: &mut SimRng) -> ModelParams {
        ModelParams {
            lambda: self.lambda.draw(rng),
            mu: self.mu.draw(rng),
            alpha: self.alpha.draw(rng),
            nu: self.nu.draw(rng),
        }
    }

    /// Ranges `centre * (1 -+ spread)` around a parameter vector.
    pub fn around(p: &ModelParams, spread: f64) -> Self {
        let r = |x: f64| ParamRange::new(x * (1.0 - spread), x * (1.0 + spread));
        Self { lambda: r(p.lambda), mu: r(p.mu), alpha: r(p.alpha), nu: r(p.nu) }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    pub max_iter: usize,
    /// Stop when the relative change of the log-likelihood falls below this.
    pub tol: f64,
    pub starts: usize,
    pub init_ranges: InitRanges,
    pub dt: f64,
    /// Truncation bound `N` of the hidden box.
    pub n_state: u32,
    /// Largest count level; defaults to `max(max Y_n, 2)`.
    pub m_obs: Option<u32>,
    /// How each start's initial skeleton is simulated.
    pub sampling: SkeletonSampling,
    pub seed: u64,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            max_iter: 500,
            tol: 1e-9,
            starts: 15,
            init_ranges: InitRanges::default(),
            dt: 1.0,
            n_state: 4,
            m_obs: None,
            sampling: SkeletonSampling::default(),
            seed: 0,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.into()));
        if !(self.tol > 0.0) {
            return bad("tol must be positive");
        }
        if self.starts == 0 {
            return bad("starts must be at least 1");
        }
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return bad("dt must be positive");
        }
        if self.n_state == 0 {
            return bad("truncation bound must be at least 1");
        }
        let r = &self.init_ranges;
        for (name, range) in [("lambda", r.lambda), ("mu", r.mu), ("alpha", r.alpha), ("nu", r.nu)] {
            if !(range.lower >= 0.0 && range.lower <= range.upper && range.upper.is_finite()) {
                return Err(Error::InvalidConfig(format!("bad {name} range {range:?}")));
            }
        }
        if r.lambda.upper >= r.mu.lower {
            return bad("lambda range must lie below mu range");
        }
        Ok(())
    }

    /// Truncation for a given series.
    pub fn truncation(&self, obs: &ObservationSeries) -> Result<TruncationConfig> {
        let m = self.m_obs.unwrap_or_else(|| obs.max().max(2));
        if let Some((index, &value)) = obs.values.iter().enumerate().find(|(_, &v)| v > m) {
            return Err(Error::ObservationExceedsBound { index, value, m_obs: m });
        }
        TruncationConfig::new(self.n_state, m)
    }
}

/// Expected sufficient statistics of one E-step.
struct Stats {
    /// `triples x pairs`, expected transition counts in compact form.
    trans: Vec<f64>,
    /// Per triple, expected occupancy over all steps.
    occupancy: Vec<f64>,
    /// `triples x (m_obs + 1)`.
    emis: Vec<f64>,
    /// Posterior of the first triple.
    first: Vec<f64>,
}

/// Running sum flushed every 64 additions into a separate total.
struct Blocked {
    total: Vec<f64>,
    block: Vec<f64>,
    count: usize,
}

impl Blocked {
    fn new(n: usize) -> Self {
        Self { total: vec![0.0; n], block: vec![0.0; n], count: 0 }
    }

    fn tick(&mut self) {
        self.count += 1;
        if self.count == 64 {
            self.flush();
        }
    }

    fn flush(&mut self) {
        for (t, b) in self.total.iter_mut().zip(self.block.iter_mut()) {
            *t += *b;
            *b = 0.0;
        }
        self.count = 0;
    }

    fn finish(mut self) -> Vec<f64> {
        self.flush();
        self.total
    }
}

fn e_step(h: &HmmModel, obs: &ObservationSeries) -> Result<(Stats, f64)> {
    let cols = emission_columns(h);
    let (alpha, scale, ll) = forward_pass(h, obs, &cols)?;
    let lat = h.lattice;
    let nt = lat.triples();
    let n = lat.pairs();
    let si = lat.i_levels();
    let se = lat.e_levels();
    let yl = h.psi.y_levels();
    let t_len = obs.len();

    let mut trans = Blocked::new(nt * n);
    let mut occ = Blocked::new(nt);
    let mut emis = Blocked::new(nt * yl);
    let mut beta = vec![1.0; nt];
    let mut beta_prev = vec![0.0; nt];
    let mut w = vec![0.0; nt];
    let mut first = vec![0.0; nt];

    for t in (0..t_len).rev() {
        let a_t = &alpha[t * nt..(t + 1) * nt];
        if t + 1 < t_len {
            // beta currently holds beta_{t+1}
            backward_into(h, &beta, &cols[obs.values[t + 1] as usize], scale[t + 1], &mut w, &mut beta_prev);
            // xi_t(x, x') = alpha_t(x) q(x, x') w(x')
            for (x, &a) in a_t.iter().enumerate() {
                let j = x % si;
                let row = &h.q[x * n..(x + 1) * n];
                let acc = &mut trans.block[x * n..(x + 1) * n];
                for e2 in 0..se {
                    let base = (e2 * si + j) * si;
                    for ((o, &qv), &wv) in acc[e2 * si..(e2 + 1) * si].iter_mut().zip(&row[e2 * si..(e2 + 1) * si]).zip(&w[base..base + si]) {
                        *o += a * qv * wv;
                    }
                }
            }
            trans.tick();
            std::mem::swap(&mut beta, &mut beta_prev);
        }
        let y = obs.values[t] as usize;
        for x in 0..nt {
            let g = a_t[x] * beta[x];
            occ.block[x] += g;
            emis.block[x * yl + y] += g;
            if t == 0 {
                first[x] = g;
            }
        }
        occ.tick();
        emis.tick();
    }
    Ok((Stats { trans: trans.finish(), occupancy: occ.finish(), emis: emis.finish(), first }, ll))
}

/// Maximizes the expected complete-data log-likelihood over skeleton
/// matrices, emissions and the initial law, then rebuilds the model.
fn m_step(h: &HmmModel, st: &Stats) -> Result<HmmModel> {
    let lat = h.lattice;
    let n = lat.pairs();
    let si = lat.i_levels();
    let se = lat.e_levels();
    let old = &h.skeleton;
    let mut probs = old.probs.clone();
    for s in lat.states() {
        let k = lat.pair_index(s);
        let occ = &st.occupancy[k * si..(k + 1) * si];
        let occ_total: f64 = occ.iter().sum();
        if occ_total <= 0.0 {
            log::debug!("state {s:?} never visited; keeping its row");
            continue;
        }
        let old_row = &old.probs[k * n..(k + 1) * n];
        let mut row = vec![0.0; n];
        for j in 0..si {
            let weight = occ[j] / occ_total;
            if weight == 0.0 {
                continue;
            }
            let trans = &st.trans[(k * si + j) * n..(k * si + j + 1) * n];
            // Expected moves (e,i) -> (e2, j), summed over the next level.
            let to: Vec<f64> = (0..se).map(|e2| trans[e2 * si..(e2 + 1) * si].iter().sum()).collect();
            let total: f64 = to.iter().sum();
            if total > 0.0 {
                for e2 in 0..se {
                    row[e2 * si + j] = weight * to[e2] / total;
                }
            } else {
                let level: f64 = (0..se).map(|e2| old_row[e2 * si + j]).sum();
                for e2 in 0..se {
                    row[e2 * si + j] = if level > 0.0 { weight * old_row[e2 * si + j] / level } else if e2 == 0 { weight } else { 0.0 };
                }
            }
        }
        probs[k * n..(k + 1) * n].copy_from_slice(&row);
    }
    let skeleton = SkeletonMatrix::new(lat, probs)?;

    let yl = h.psi.y_levels();
    let mut psi = h.psi.clone();
    for x in 0..lat.triples().min(st.emis.len() / yl) {
        let occ = st.occupancy[x];
        if occ > 0.0 {
            let total: f64 = st.emis[x * yl..(x + 1) * yl].iter().sum();
            for y in 0..yl {
                psi.probs[x * yl + y] = st.emis[x * yl + y] / total;
            }
        }
    }

    let mut pi = vec![0.0; n];
    for (x, &g) in st.first.iter().enumerate() {
        pi[x / si] += g;
    }
    let total: f64 = pi.iter().sum();
    pi.iter_mut().for_each(|v| *v /= total);
    build_hmm(&skeleton, &psi, &pi)
}

/// One EM iteration. Returns the updated model and the log-likelihood of the
/// model passed in.
pub fn bw_step(h: &HmmModel, obs: &ObservationSeries) -> Result<(HmmModel, f64)> {
    bw_step_with(h, obs, true)
}

/// [`bw_step`] with the option of holding the emissions fixed.
pub fn bw_step_with(h: &HmmModel, obs: &ObservationSeries, update_emissions: bool) -> Result<(HmmModel, f64)> {
    let (mut stats, ll) = e_step(h, obs)?;
    if !update_emissions {
        stats.emis.clear();
    }
    Ok((m_step(h, &stats)?, ll))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StartOutcome<P> {
    pub index: usize,
    pub init: P,
    /// `[L(h_0), L(h_1), ..., L(h_final)]`.
    pub trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub error: Option<String>,
}

impl<P> StartOutcome<P> {
    pub fn final_log_likelihood(&self) -> Option<f64> {
        if self.error.is_some() {
            None
        } else {
            self.trace.last().copied()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult<P = ModelParams> {
    pub model: HmmModel,
    pub log_likelihood: f64,
    pub best: usize,
    pub starts: Vec<StartOutcome<P>>,
    pub truncation: TruncationConfig,
}

impl<P> FitResult<P> {
    /// Recovered skeleton matrix.
    pub fn skeleton(&self) -> &SkeletonMatrix {
        &self.model.skeleton
    }
}

/// Runs EM from `h` until the relative change of the log-likelihood drops
/// below `tol` or `max_iter` steps were taken.
pub fn run_em(mut h: HmmModel, obs: &ObservationSeries, max_iter: usize, tol: f64) -> Result<(HmmModel, Vec<f64>, usize, bool)> {
    let mut trace = Vec::new();
    let mut converged = false;
    let mut iterations = 0;
    while iterations < max_iter {
        let (next, ll) = bw_step(&h, obs)?;
        if let Some(&prev) = trace.last() {
            let prev: f64 = prev;
            if ll < prev - 1e-8 {
                log::warn!("log-likelihood decreased from {prev} to {ll}");
            }
            if (ll - prev).abs() <= tol * prev.abs().max(f64::MIN_POSITIVE) {
                converged = true;
                trace.push(ll);
                break;
            }
        }
        trace.push(ll);
        h = next;
        iterations += 1;
    }
    if converged {
        // The last step only confirmed convergence; h is the model it scored.
        return Ok((h, trace, iterations, true));
    }
    let ll = log_likelihood(&h, obs)?;
    trace.push(ll);
    Ok((h, trace, iterations, converged))
}

/// Multi-start EM on `lattice`. Each start draws parameters with `draw` and
/// turns them into an initial skeleton with `init`.
pub fn fit_family<P, D, I>(obs: &ObservationSeries, cfg: &FitConfig, lattice: Lattice, draw: D, init: I) -> Result<FitResult<P>>
where
    P: Send + Clone,
    D: Fn(&mut SimRng) -> P + Sync,
    I: Fn(&P, TruncationConfig, u64) -> Result<SkeletonEstimate> + Sync,
{
    cfg.validate()?;
    let trunc = cfg.truncation(obs)?;
    if lattice.i_max != trunc.n_state {
        return Err(Error::Shape("lattice does not match truncation bound".into()));
    }
    let runs: Vec<(StartOutcome<P>, Option<HmmModel>)> = (0..cfg.starts)
        .into_par_iter()
        .map(|k| {
            let mut rng = replica_rng(derive_seed(cfg.seed, 1), k as u64);
            let params = draw(&mut rng);
            let attempt = || -> Result<(HmmModel, Vec<f64>, usize, bool)> {
                let est = init(&params, trunc, derive_seed(cfg.seed, 2 + k as u64))?;
                let pi = est.matrix.stationary();
                let h0 = build_hmm(&est.matrix, &est.emissions, &pi)?;
                run_em(h0, obs, cfg.max_iter, cfg.tol)
            };
            match attempt() {
                Ok((h, trace, iterations, converged)) => (
                    StartOutcome { index: k, init: params, trace, iterations, converged, error: None },
                    Some(h),
                ),
                Err(e) => {
                    log::warn!("start {k} failed: {e}");
                    (
                        StartOutcome { index: k, init: params, trace: vec![], iterations: 0, converged: false, error: Some(e.to_string()) },
                        None,
                    )
                }
            }
        })
        .collect();
    let best = runs
        .iter()
        .enumerate()
        .filter_map(|(k, (o, _))| o.final_log_likelihood().map(|l| (k, l)))
        .fold(None, |acc: Option<(usize, f64)>, (k, l)| match acc {
            Some((_, bl)) if bl >= l => acc,
            _ => Some((k, l)),
        });
    let Some((best, log_likelihood)) = best else {
        let msgs: Vec<String> = runs.iter().filter_map(|(o, _)| o.error.clone()).collect();
        return Err(Error::AllStartsFailed(msgs.join("; ")));
    };
    let mut starts = Vec::with_capacity(runs.len());
    let mut model = None;
    for (k, (o, h)) in runs.into_iter().enumerate() {
        if k == best {
            model = h;
        }
        starts.push(o);
    }
    Ok(FitResult { model: model.unwrap(), log_likelihood, best, starts, truncation: trunc })
}

/// Multi-start fit of the exposed-infected model.
pub fn fit(obs: &ObservationSeries, cfg: &FitConfig) -> Result<FitResult> {
    let lattice = Lattice::square(cfg.n_state);
    fit_family(
        obs,
        cfg,
        lattice,
        |rng| cfg.init_ranges.draw(rng),
        |p: &ModelParams, trunc, seed| estimate_skeleton_dynamics(p, lattice, trunc.m_obs, cfg.dt, cfg.sampling, seed),
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimationReport {
    pub params: ModelParams,
    pub moments: LimitMoments,
    pub chain_moments: ChainMoments,
    pub chain_steps: usize,
    pub fit: FitResult,
}

/// Empirical limit moments of the fitted chain.
pub fn chain_limit_moments(
    fit: &HmmModel,
    dt: f64,
    chain_steps: usize,
    seed: u64,
) -> Result<ChainMoments> {
    if chain_steps == 0 {
        return Err(Error::InvalidConfig("chain_steps must be positive".into()));
    }
    let chain = simulate_skeleton(&fit.skeleton, Some(&fit.psi), EiState::ORIGIN, dt, chain_steps, DEFAULT_BURN_IN, seed)?;
    Ok(chain.moments())
}

/// Fit, simulate the fitted chain, and invert its moments.
pub fn estimate_parameters(obs: &ObservationSeries, cfg: &FitConfig, chain_steps: usize, seed: u64) -> Result<EstimationReport> {
    estimate_from_fit(fit(obs, cfg)?, cfg.dt, chain_steps, seed)
}

/// Moment-recovery stage on an existing fit.
pub fn estimate_from_fit(fit: FitResult, dt: f64, chain_steps: usize, seed: u64) -> Result<EstimationReport> {
    let cm = chain_limit_moments(&fit.model, dt, chain_steps, seed)?;
    let moments = LimitMoments::new(cm.e.mean, cm.i.mean, cm.ei.mean, cm.n_rate.map_or(0.0, |n| n.mean));
    let params = invert_moments(&moments)?;
    Ok(EstimationReport { params, moments, chain_moments: cm, chain_steps, fit })
}
