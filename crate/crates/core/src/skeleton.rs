//! The discrete-time skeleton of the chain on a truncated box: transition
//! matrix, window-count emissions, their Monte Carlo estimation and
//! truncation correction, and simulation of the truncated chain.

use std::io::Write;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lattice::Lattice;
use crate::master_eq::transition_tensor;
use crate::params::{AugmentedState, EiState, ModelParams, TruncationConfig};
use crate::rng::{derive_seed, replica_rng};
use crate::sim::{run_path, Dynamics, Estimate, EventKind};

/// Interior rows losing more than this to the box boundary are rejected.
pub const MAX_ROW_DEFICIT: f64 = 0.05;

/// Row-stochastic transition matrix between states of a box.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkeletonMatrix {
    pub lattice: Lattice,
    /// `pairs x pairs`, row = current state.
    pub probs: Vec<f64>,
}

impl SkeletonMatrix {
    pub fn new(lattice: Lattice, probs: Vec<f64>) -> Result<Self> {
        let n = lattice.pairs();
        if probs.len() != n * n {
            return Err(Error::Shape(format!("expected {} entries, got {}", n * n, probs.len())));
        }
        Ok(Self { lattice, probs })
    }

    pub fn identity(lattice: Lattice) -> Self {
        let n = lattice.pairs();
        let mut probs = vec![0.0; n * n];
        for k in 0..n {
            probs[k * n + k] = 1.0;
        }
        Self { lattice, probs }
    }

    pub fn n_state(&self) -> u32 {
        self.lattice.i_max
    }

    pub fn get(&self, from: EiState, to: EiState) -> f64 {
        self.probs[self.lattice.pair_index(from) * self.lattice.pairs() + self.lattice.pair_index(to)]
    }

    pub fn row(&self, from: EiState) -> &[f64] {
        let n = self.lattice.pairs();
        let k = self.lattice.pair_index(from);
        &self.probs[k * n..(k + 1) * n]
    }

    /// `p_{(e,i),(.,j)}`: probability of moving to any state with `I = j`.
    pub fn to_level(&self, from: EiState, j: u32) -> f64 {
        let row = self.row(from);
        (0..=self.lattice.e_max)
            .map(|k| row[self.lattice.pair_index(EiState::new(k, j))])
            .sum()
    }

    pub fn max_row_error(&self) -> f64 {
        self.probs
            .chunks(self.lattice.pairs())
            .map(|r| (r.iter().sum::<f64>() - 1.0).abs())
            .fold(0.0, f64::max)
    }

    /// Stationary distribution by power iteration from uniform.
    pub fn stationary(&self) -> Vec<f64> {
        let n = self.lattice.pairs();
        let mut pi = vec![1.0 / n as f64; n];
        let mut next = vec![0.0; n];
        for _ in 0..100_000 {
            next.iter_mut().for_each(|x| *x = 0.0);
            for (k, &w) in pi.iter().enumerate() {
                if w == 0.0 {
                    continue;
                }
                for (x, &p) in next.iter_mut().zip(&self.probs[k * n..(k + 1) * n]) {
                    *x += w * p;
                }
            }
            let total: f64 = next.iter().sum();
            next.iter_mut().for_each(|x| *x /= total);
            let diff: f64 = pi.iter().zip(&next).map(|(a, b)| (a - b).abs()).sum();
            std::mem::swap(&mut pi, &mut next);
            if diff < 1e-14 {
                break;
            }
        }
        pi
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["e", "i", "e_to", "i_to", "prob"])?;
        for from in self.lattice.states() {
            for to in self.lattice.states() {
                out.write_record([
                    from.e.to_string(),
                    from.i.to_string(),
                    to.e.to_string(),
                    to.i.to_string(),
                    self.get(from, to).to_string(),
                ])?;
            }
        }
        out.flush()?;
        Ok(())
    }
}

/// Distribution of the window count `Y_n` given `(E_{n-1}, I_{n-1}, I_n)`.
/// The last level `m_obs` stands for "at least `m_obs`".
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmissionTable {
    pub lattice: Lattice,
    pub m_obs: u32,
    /// `triples x (m_obs + 1)`.
    pub probs: Vec<f64>,
}

impl EmissionTable {
    pub fn new(lattice: Lattice, m_obs: u32, probs: Vec<f64>) -> Result<Self> {
        let want = lattice.triples() * (m_obs as usize + 1);
        if probs.len() != want {
            return Err(Error::Shape(format!("expected {want} emission entries, got {}", probs.len())));
        }
        Ok(Self { lattice, m_obs, probs })
    }

    pub fn y_levels(&self) -> usize {
        self.m_obs as usize + 1
    }

    pub fn get(&self, x: AugmentedState, y: u32) -> f64 {
        self.probs[self.lattice.triple_index(x) * self.y_levels() + y as usize]
    }

    pub fn row(&self, x: AugmentedState) -> &[f64] {
        let k = self.lattice.triple_index(x);
        &self.probs[k * self.y_levels()..(k + 1) * self.y_levels()]
    }

    /// Smallest count compatible with a drop from `i` to `j`, capped at `m_obs`.
    pub fn min_count(&self, x: AugmentedState) -> u32 {
        x.i.saturating_sub(x.j).min(self.m_obs)
    }

    pub fn max_row_error(&self) -> f64 {
        self.probs
            .chunks(self.y_levels())
            .map(|r| (r.iter().sum::<f64>() - 1.0).abs())
            .fold(0.0, f64::max)
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["e", "i", "j", "y", "prob"])?;
        for x in self.lattice.augmented_states() {
            for y in 0..=self.m_obs {
                out.write_record([
                    x.e.to_string(),
                    x.i.to_string(),
                    x.j.to_string(),
                    y.to_string(),
                    self.get(x, y).to_string(),
                ])?;
            }
        }
        out.flush()?;
        Ok(())
    }
}

/// Puts each row's missing mass on the corner state. Non-corner entries are
/// left untouched. Interior rows missing more than [`MAX_ROW_DEFICIT`] are
/// rejected; rows on the box edge are expected to leak.
pub fn apply_truncation_correction(raw: &SkeletonMatrix) -> Result<SkeletonMatrix> {
    let lat = raw.lattice;
    let n = lat.pairs();
    let corner = lat.pair_index(lat.corner());
    let mut out = raw.clone();
    for from in lat.states() {
        let k = lat.pair_index(from);
        let row = &mut out.probs[k * n..(k + 1) * n];
        let total: f64 = row.iter().sum();
        let deficit = 1.0 - total;
        if deficit < -1e-9 || row.iter().any(|&p| !(0.0..=1.0 + 1e-12).contains(&p)) {
            return Err(Error::Shape(format!("row {from:?} is not a sub-distribution (sum {total})")));
        }
        if !lat.on_edge(from) && deficit > MAX_ROW_DEFICIT {
            return Err(Error::TruncationTooAggressive { row: from, deficit });
        }
        let others: f64 = row.iter().enumerate().filter(|&(c, _)| c != corner).map(|(_, p)| p).sum();
        row[corner] = (1.0 - others).max(0.0);
    }
    Ok(out)
}

/// Makes every emission row a distribution: the top level absorbs the
/// remaining mass. Rows with no mass at all become a point mass on the
/// smallest compatible count.
pub fn correct_emissions(raw: &EmissionTable) -> EmissionTable {
    let mut out = raw.clone();
    let yl = out.y_levels();
    let m = yl - 1;
    let triples: Vec<AugmentedState> = out.lattice.augmented_states().collect();
    for (row, x) in out.probs.chunks_mut(yl).zip(triples) {
        if row.iter().sum::<f64>() <= 0.0 {
            row[x.i.saturating_sub(x.j).min(m as u32) as usize] = 1.0;
            continue;
        }
        let below: f64 = row[..m].iter().sum();
        row[m] = (1.0 - below).max(0.0);
    }
    out
}

/// How the Monte Carlo skeleton estimate draws its one-window transitions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SkeletonSampling {
    /// Independent windows started from every state of the box.
    PerState { transitions_per_row: usize },
    /// Long trajectories from the origin, tallied window by window. Rows
    /// never visited fall back to the master-equation row.
    Pooled { replicas: usize, windows_per_replica: usize, burn_in: usize },
}

impl Default for SkeletonSampling {
    fn default() -> Self {
        SkeletonSampling::PerState { transitions_per_row: 10_000 }
    }
}

/// Raw tallies behind a Monte Carlo skeleton estimate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkeletonCounts {
    pub lattice: Lattice,
    pub m_obs: u32,
    /// Windows started from each state.
    pub row_totals: Vec<u64>,
    /// `pairs x pairs` end-state counts inside the box.
    pub transitions: Vec<u64>,
    /// `triples x (m_obs + 1)` window counts, capped at `m_obs`.
    pub emissions: Vec<u64>,
}

impl SkeletonCounts {
    fn new(lattice: Lattice, m_obs: u32) -> Self {
        let n = lattice.pairs();
        Self {
            lattice,
            m_obs,
            row_totals: vec![0; n],
            transitions: vec![0; n * n],
            emissions: vec![0; lattice.triples() * (m_obs as usize + 1)],
        }
    }

    /// Records one window. Windows ending outside the box are charged to the
    /// top level `j = N`, where the corrected matrix puts their mass.
    fn record(&mut self, from: EiState, to: EiState, y: u32) {
        let lat = self.lattice;
        let k = lat.pair_index(from);
        self.row_totals[k] += 1;
        let j = if lat.contains(to) {
            self.transitions[k * lat.pairs() + lat.pair_index(to)] += 1;
            to.i
        } else {
            lat.i_max
        };
        let x = AugmentedState { e: from.e, i: from.i, j };
        let yl = self.m_obs as usize + 1;
        self.emissions[lat.triple_index(x) * yl + y.min(self.m_obs) as usize] += 1;
    }

    fn merge(mut self, other: Self) -> Self {
        for (a, b) in self.row_totals.iter_mut().zip(other.row_totals) {
            *a += b;
        }
        for (a, b) in self.transitions.iter_mut().zip(other.transitions) {
            *a += b;
        }
        for (a, b) in self.emissions.iter_mut().zip(other.emissions) {
            *a += b;
        }
        self
    }

    pub fn unvisited(&self) -> Vec<EiState> {
        self.lattice.states().filter(|s| self.row_totals[self.lattice.pair_index(*s)] == 0).collect()
    }

    /// Empirical frequencies; rows never visited are all zero.
    pub fn raw_matrix(&self) -> SkeletonMatrix {
        let n = self.lattice.pairs();
        let mut probs = vec![0.0; n * n];
        for k in 0..n {
            let total = self.row_totals[k];
            if total == 0 {
                continue;
            }
            for c in 0..n {
                probs[k * n + c] = self.transitions[k * n + c] as f64 / total as f64;
            }
        }
        SkeletonMatrix { lattice: self.lattice, probs }
    }

    pub fn raw_emissions(&self) -> EmissionTable {
        let yl = self.m_obs as usize + 1;
        let mut probs = vec![0.0; self.emissions.len()];
        for (out, counts) in probs.chunks_mut(yl).zip(self.emissions.chunks(yl)) {
            let total: u64 = counts.iter().sum();
            if total > 0 {
                for (o, &c) in out.iter_mut().zip(counts) {
                    *o = c as f64 / total as f64;
                }
            }
        }
        EmissionTable { lattice: self.lattice, m_obs: self.m_obs, probs }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkeletonEstimate {
    pub matrix: SkeletonMatrix,
    pub emissions: EmissionTable,
    pub counts: SkeletonCounts,
    /// Rows filled from the master equation instead of samples.
    pub fallback_rows: Vec<EiState>,
}

/// One window from `from`: end state and isolations counted.
fn one_window<D: Dynamics + ?Sized>(d: &D, from: EiState, dt: f64, rng: &mut crate::rng::SimRng) -> (EiState, u32) {
    let mut y = 0u32;
    let end = run_path(d, from, dt, rng, |ev| {
        if ev.kind == EventKind::Isolation {
            y += 1;
        }
    });
    (end, y)
}

fn tally<D: Dynamics + ?Sized>(
    d: &D,
    lattice: Lattice,
    m_obs: u32,
    dt: f64,
    sampling: SkeletonSampling,
    seed: u64,
) -> Result<SkeletonCounts> {
    if !dt.is_finite() || dt <= 0.0 {
        return Err(Error::InvalidConfig(format!("dt must be positive, got {dt}")));
    }
    let empty = || SkeletonCounts::new(lattice, m_obs);
    let counts = match sampling {
        SkeletonSampling::PerState { transitions_per_row } => {
            if transitions_per_row == 0 {
                return Err(Error::InvalidConfig("transitions_per_row must be positive".into()));
            }
            let states: Vec<EiState> = lattice.states().collect();
            states
                .par_iter()
                .map(|&s| {
                    let mut rng = replica_rng(seed, lattice.pair_index(s) as u64);
                    let mut c = empty();
                    for _ in 0..transitions_per_row {
                        let (end, y) = one_window(d, s, dt, &mut rng);
                        c.record(s, end, y);
                    }
                    c
                })
                .reduce(empty, SkeletonCounts::merge)
        }
        SkeletonSampling::Pooled { replicas, windows_per_replica, burn_in } => {
            if replicas == 0 || windows_per_replica == 0 {
                return Err(Error::InvalidConfig("pooled sampling needs replicas and windows".into()));
            }
            (0..replicas as u64)
                .into_par_iter()
                .map(|r| {
                    let mut rng = replica_rng(seed, r);
                    let mut c = empty();
                    let mut s = EiState::ORIGIN;
                    for n in 0..burn_in + windows_per_replica {
                        let (end, y) = one_window(d, s, dt, &mut rng);
                        if n >= burn_in && lattice.contains(s) {
                            c.record(s, end, y);
                        }
                        s = end;
                    }
                    c
                })
                .reduce(empty, SkeletonCounts::merge)
        }
    };
    Ok(counts)
}

/// Monte Carlo estimate of the skeleton of any dynamics on `lattice`.
pub fn estimate_skeleton_dynamics<D: Dynamics + ?Sized>(
    d: &D,
    lattice: Lattice,
    m_obs: u32,
    dt: f64,
    sampling: SkeletonSampling,
    seed: u64,
) -> Result<SkeletonEstimate> {
    let counts = tally(d, lattice, m_obs, dt, sampling, seed)?;
    let mut raw = counts.raw_matrix();
    let unvisited = counts.unvisited();
    if !unvisited.is_empty() {
        log::warn!("{} skeleton rows never visited; using master-equation rows", unvisited.len());
        let oracle = transition_tensor(d, lattice, dt)?;
        let n = lattice.pairs();
        for s in &unvisited {
            let k = lattice.pair_index(*s);
            raw.probs[k * n..(k + 1) * n].copy_from_slice(oracle.row(*s));
        }
    }
    let matrix = apply_truncation_correction(&raw)?;
    let emissions = correct_emissions(&counts.raw_emissions());
    Ok(SkeletonEstimate { matrix, emissions, counts, fallback_rows: unvisited })
}

/// Monte Carlo estimate of the corrected skeleton matrix and emissions.
pub fn estimate_skeleton(
    p: &ModelParams,
    trunc: TruncationConfig,
    dt: f64,
    sampling: SkeletonSampling,
    seed: u64,
) -> Result<SkeletonEstimate> {
    p.validate()?;
    estimate_skeleton_dynamics(p, Lattice::square(trunc.n_state), trunc.m_obs, dt, sampling, seed)
}

/// Corrected master-equation skeleton matrix.
pub fn oracle_skeleton(p: &ModelParams, trunc: TruncationConfig, dt: f64) -> Result<SkeletonMatrix> {
    p.validate()?;
    let t = transition_tensor(p, Lattice::square(trunc.n_state), dt)?;
    apply_truncation_correction(&SkeletonMatrix { lattice: t.lattice, probs: t.probs().to_vec() })
}

/// A run of the truncated chain, with emitted counts when emissions were
/// supplied. `states[0]` is the state after burn-in; `emissions[n]` is the
/// count of the window from `states[n]` to `states[n + 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkeletonChain {
    pub dt: f64,
    pub states: Vec<EiState>,
    pub emissions: Option<Vec<u32>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChainMoments {
    pub e: Estimate,
    pub i: Estimate,
    pub ei: Estimate,
    pub ii: Estimate,
    /// Mean count per unit time, when emissions are present.
    pub n_rate: Option<Estimate>,
}

const BATCHES: usize = 50;

/// Mean with a batch-means confidence half-width.
fn batch_estimate(xs: impl ExactSizeIterator<Item = f64> + Clone) -> Estimate {
    let n = xs.len();
    let mean = xs.clone().sum::<f64>() / n as f64;
    if n < 2 * BATCHES {
        return Estimate::from_samples(xs);
    }
    let size = n / BATCHES;
    let v: Vec<f64> = xs.collect();
    let means = v.chunks_exact(size).take(BATCHES).map(|c| c.iter().sum::<f64>() / size as f64);
    let est = Estimate::from_samples(means);
    Estimate { mean, half_width: est.half_width }
}

impl SkeletonChain {
    pub fn moments(&self) -> ChainMoments {
        let s = &self.states;
        let f = |g: fn(&EiState) -> f64| batch_estimate(s.iter().map(g));
        ChainMoments {
            e: f(|s| f64::from(s.e)),
            i: f(|s| f64::from(s.i)),
            ei: f(|s| f64::from(s.e) * f64::from(s.i)),
            ii: f(|s| f64::from(s.i) * f64::from(s.i)),
            n_rate: self.emissions.as_ref().map(|y| {
                let est = batch_estimate(y.iter().map(|&v| f64::from(v)));
                Estimate { mean: est.mean / self.dt, half_width: est.half_width / self.dt }
            }),
        }
    }
}

/// Moments of the truncated chain under its stationary law, computed
/// exactly from the matrix (and emissions, for the count rate).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StationaryMoments {
    pub e: f64,
    pub i: f64,
    pub ei: f64,
    pub ii: f64,
    /// Mean count per unit time.
    pub n_rate: Option<f64>,
}

pub fn stationary_moments(m: &SkeletonMatrix, psi: Option<&EmissionTable>, dt: f64) -> StationaryMoments {
    let lat = m.lattice;
    let pi = m.stationary();
    let avg = |f: &dyn Fn(EiState) -> f64| lat.states().map(|s| pi[lat.pair_index(s)] * f(s)).sum::<f64>();
    let n_rate = psi.map(|psi| {
        let mut mean_y = 0.0;
        for s in lat.states() {
            for j in 0..=lat.i_max {
                let x = AugmentedState { e: s.e, i: s.i, j };
                let ey: f64 = psi.row(x).iter().enumerate().map(|(y, p)| y as f64 * p).sum();
                mean_y += pi[lat.pair_index(s)] * m.to_level(s, j) * ey;
            }
        }
        mean_y / dt
    });
    StationaryMoments {
        e: avg(&|s| f64::from(s.e)),
        i: avg(&|s| f64::from(s.i)),
        ei: avg(&|s| f64::from(s.e) * f64::from(s.i)),
        ii: avg(&|s| f64::from(s.i) * f64::from(s.i)),
        n_rate,
    }
}

/// Cumulative rows for inverse-CDF sampling.
fn cumulative(rows: &[f64], width: usize) -> Vec<f64> {
    let mut out = rows.to_vec();
    for r in out.chunks_mut(width) {
        let mut acc = 0.0;
        for x in r.iter_mut() {
            acc += *x;
            *x = acc;
        }
    }
    out
}

fn draw(cum: &[f64], u: f64) -> usize {
    let total = *cum.last().unwrap();
    let target = u * total;
    cum.iter().position(|&c| target < c).unwrap_or(cum.len() - 1)
}

/// Runs the truncated chain for `burn_in + steps` windows from `initial`,
/// keeping the last `steps + 1` states.
pub fn simulate_skeleton(
    m: &SkeletonMatrix,
    psi: Option<&EmissionTable>,
    initial: EiState,
    dt: f64,
    steps: usize,
    burn_in: usize,
    seed: u64,
) -> Result<SkeletonChain> {
    let lat = m.lattice;
    if !lat.contains(initial) {
        return Err(Error::InvalidConfig(format!("initial state {initial:?} outside the box")));
    }
    if let Some(psi) = psi {
        if psi.lattice != lat {
            return Err(Error::Shape("emission table and matrix use different boxes".into()));
        }
    }
    let n = lat.pairs();
    let cum = cumulative(&m.probs, n);
    let cum_psi = psi.map(|p| (cumulative(&p.probs, p.y_levels()), p.y_levels()));
    let mut rng = replica_rng(seed, 0);
    let mut k = lat.pair_index(initial);
    let mut states = Vec::with_capacity(steps + 1);
    let mut emissions = psi.map(|_| Vec::with_capacity(steps));
    for step in 0..burn_in + steps {
        if step >= burn_in && states.is_empty() {
            states.push(lat.pair_at(k));
        }
        let next = draw(&cum[k * n..(k + 1) * n], rng.random());
        if let (Some((cp, yl)), true) = (&cum_psi, step >= burn_in) {
            let from = lat.pair_at(k);
            let x = AugmentedState { e: from.e, i: from.i, j: lat.pair_at(next).i };
            let t = lat.triple_index(x);
            let y = draw(&cp[t * yl..(t + 1) * yl], rng.random());
            emissions.as_mut().unwrap().push(y as u32);
        }
        k = next;
        if step >= burn_in {
            states.push(lat.pair_at(k));
        }
    }
    if states.is_empty() {
        states.push(lat.pair_at(k));
    }
    Ok(SkeletonChain { dt, states, emissions })
}

/// End states of `samples` independent runs of `steps` windows each.
pub fn sample_skeleton_endpoints(
    m: &SkeletonMatrix,
    initial: EiState,
    samples: usize,
    steps: usize,
    seed: u64,
) -> Result<Vec<EiState>> {
    let lat = m.lattice;
    if !lat.contains(initial) {
        return Err(Error::InvalidConfig(format!("initial state {initial:?} outside the box")));
    }
    let n = lat.pairs();
    let cum = cumulative(&m.probs, n);
    let seed = derive_seed(seed, 0x5eed);
    Ok((0..samples as u64)
        .into_par_iter()
        .map(|r| {
            let mut rng = replica_rng(seed, r);
            let mut k = lat.pair_index(initial);
            for _ in 0..steps {
                k = draw(&cum[k * n..(k + 1) * n], rng.random());
            }
            lat.pair_at(k)
        })
        .collect())
}
