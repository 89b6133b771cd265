//! The hidden Markov model on triples `(E_{n-1}, I_{n-1}, I_n)` induced by a
//! skeleton matrix, with scaled forward/backward recursions.
//!
//! A move from `(e, i, j)` can only reach triples `(e', j, j')`, so the
//! transition matrix is stored compactly as `triples x pairs`, with column
//! `pair(e', j')` standing for the target `(e', j, j')`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lattice::Lattice;
use crate::params::{AugmentedState, EiState};
use crate::sim::ObservationSeries;
use crate::skeleton::{EmissionTable, SkeletonMatrix};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HmmModel {
    pub lattice: Lattice,
    pub m_obs: u32,
    /// Compact transition matrix, `triples x pairs`.
    pub q: Vec<f64>,
    pub psi: EmissionTable,
    /// Initial distribution over triples.
    pub rho: Vec<f64>,
    /// Initial distribution over pairs.
    pub pi: Vec<f64>,
    pub skeleton: SkeletonMatrix,
}

impl HmmModel {
    pub fn n_state(&self) -> u32 {
        self.lattice.i_max
    }

    /// Transition probability between triples; zero unless `to.i == from.j`.
    pub fn q(&self, from: AugmentedState, to: AugmentedState) -> f64 {
        if to.i != from.j {
            return 0.0;
        }
        let lat = self.lattice;
        self.q[lat.triple_index(from) * lat.pairs() + lat.pair_index(EiState::new(to.e, to.j))]
    }

    pub fn q_row(&self, from: AugmentedState) -> &[f64] {
        let n = self.lattice.pairs();
        let k = self.lattice.triple_index(from);
        &self.q[k * n..(k + 1) * n]
    }

    pub fn max_row_error(&self) -> f64 {
        self.q
            .chunks(self.lattice.pairs())
            .map(|r| (r.iter().sum::<f64>() - 1.0).abs())
            .fold(0.0, f64::max)
    }

    pub fn check_observations(&self, obs: &ObservationSeries) -> Result<()> {
        if obs.is_empty() {
            return Err(Error::InvalidConfig("observation series is empty".into()));
        }
        if let Some((index, &value)) = obs.values.iter().enumerate().find(|(_, &v)| v > self.m_obs) {
            return Err(Error::ObservationExceedsBound { index, value, m_obs: self.m_obs });
        }
        Ok(())
    }
}

/// Assembles `(q, psi, rho)` from a skeleton matrix, emissions and an initial
/// law over pairs. Triples that cannot occur (`p_{(e,i),(.,j)} = 0`) get a
/// point-mass row on `(0, j, j)` and no initial mass.
pub fn build_hmm(skeleton: &SkeletonMatrix, psi: &EmissionTable, pi: &[f64]) -> Result<HmmModel> {
    let lat = skeleton.lattice;
    if psi.lattice != lat {
        return Err(Error::Shape("emission table and skeleton use different boxes".into()));
    }
    if pi.len() != lat.pairs() {
        return Err(Error::Shape(format!("initial law has {} entries, expected {}", pi.len(), lat.pairs())));
    }
    let n = lat.pairs();
    let si = lat.i_levels();
    // level[(e,i) * si + j] = p_{(e,i),(.,j)}
    let mut level = vec![0.0; lat.triples()];
    for s in lat.states() {
        let row = skeleton.row(s);
        for (c, &p) in row.iter().enumerate() {
            level[lat.pair_index(s) * si + c % si] += p;
        }
    }
    let mut q = vec![0.0; lat.triples() * n];
    let mut rho = vec![0.0; lat.triples()];
    for x in lat.augmented_states() {
        let k = lat.triple_index(x);
        let from = EiState::new(x.e, x.i);
        let out = &mut q[k * n..(k + 1) * n];
        let denom = level[k];
        rho[k] = denom * pi[lat.pair_index(from)];
        if denom <= 0.0 {
            out[lat.pair_index(EiState::new(0, x.j))] = 1.0;
            continue;
        }
        let row = skeleton.row(from);
        for e2 in 0..=lat.e_max {
            let mid = EiState::new(e2, x.j);
            let p_mid = row[lat.pair_index(mid)];
            if p_mid == 0.0 {
                continue;
            }
            let w = p_mid / denom;
            let mid_base = lat.pair_index(mid) * si;
            for j2 in 0..si {
                out[e2 as usize * si + j2] = level[mid_base + j2] * w;
            }
        }
    }
    Ok(HmmModel { lattice: lat, m_obs: psi.m_obs, q, psi: psi.clone(), rho, pi: pi.to_vec(), skeleton: skeleton.clone() })
}

/// Scaled forward/backward quantities. `alpha` and `beta` are `T x triples`,
/// `alpha` rows sum to one and `alpha * beta` is the posterior.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardBackward {
    pub n_triples: usize,
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
    pub scale: Vec<f64>,
    pub log_likelihood: f64,
}

impl ForwardBackward {
    pub fn len(&self) -> usize {
        self.scale.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scale.is_empty()
    }

    pub fn gamma(&self, t: usize) -> Vec<f64> {
        let n = self.n_triples;
        self.alpha[t * n..(t + 1) * n].iter().zip(&self.beta[t * n..(t + 1) * n]).map(|(a, b)| a * b).collect()
    }
}

/// Sums `log c_t` in blocks to keep rounding from piling up on long series.
#[derive(Default)]
pub(crate) struct BlockSum {
    total: f64,
    block: f64,
    count: usize,
}

impl BlockSum {
    pub(crate) fn add(&mut self, x: f64) {
        self.block += x;
        self.count += 1;
        if self.count == 64 {
            self.total += self.block;
            self.block = 0.0;
            self.count = 0;
        }
    }

    pub(crate) fn value(&self) -> f64 {
        self.total + self.block
    }
}

fn emission_column(h: &HmmModel, y: u32) -> Vec<f64> {
    let yl = h.psi.y_levels();
    h.psi.probs.iter().skip(y as usize).step_by(yl).copied().collect()
}

/// One forward step: `next(x') = sum_x cur(x) q(x, x') psi_x'(y)`.
/// Sources sharing `j` all feed the targets `(e', j, .)`, so those are
/// accumulated as one contiguous `pairs`-long block per `j`.
fn forward_step(h: &HmmModel, cur: &[f64], psi_y: &[f64], next: &mut [f64]) -> f64 {
    let n = h.lattice.pairs();
    let si = h.lattice.i_levels();
    let mut acc = vec![0.0; n];
    for j in 0..si {
        acc.iter_mut().for_each(|v| *v = 0.0);
        for x in (j..cur.len()).step_by(si) {
            let a = cur[x];
            for (d, &qv) in acc.iter_mut().zip(&h.q[x * n..(x + 1) * n]) {
                *d += a * qv;
            }
        }
        for (e2, block) in acc.chunks_exact(si).enumerate() {
            let base = (e2 * si + j) * si;
            next[base..base + si].copy_from_slice(block);
        }
    }
    let mut c = 0.0;
    for (v, &p) in next.iter_mut().zip(psi_y) {
        *v *= p;
        c += *v;
    }
    c
}

/// `out(x) = sum_x' q(x, x') w(x')`, gathering `w(e', j, .)` per `j`.
fn backward_step(h: &HmmModel, w: &[f64], out: &mut [f64]) {
    let n = h.lattice.pairs();
    let si = h.lattice.i_levels();
    let mut gathered = vec![0.0; n];
    for j in 0..si {
        for (e2, block) in gathered.chunks_exact_mut(si).enumerate() {
            let base = (e2 * si + j) * si;
            block.copy_from_slice(&w[base..base + si]);
        }
        for x in (j..out.len()).step_by(si) {
            out[x] = h.q[x * n..(x + 1) * n].iter().zip(&gathered).map(|(a, b)| a * b).sum();
        }
    }
}

fn zero_likelihood(t: usize) -> Error {
    Error::Shape(format!("observations have zero probability under the model (at step {})", t + 1))
}

/// Scaled forward pass only; returns the log-likelihood.
pub fn log_likelihood(h: &HmmModel, obs: &ObservationSeries) -> Result<f64> {
    h.check_observations(obs)?;
    let nt = h.lattice.triples();
    let cols: Vec<Vec<f64>> = (0..=h.m_obs).map(|y| emission_column(h, y)).collect();
    let mut cur: Vec<f64> = h.rho.iter().zip(&cols[obs.values[0] as usize]).map(|(r, p)| r * p).collect();
    let mut next = vec![0.0; nt];
    let mut ll = BlockSum::default();
    let c0: f64 = cur.iter().sum();
    if c0 <= 0.0 {
        return Err(zero_likelihood(0));
    }
    cur.iter_mut().for_each(|v| *v /= c0);
    ll.add(c0.ln());
    for (t, &y) in obs.values.iter().enumerate().skip(1) {
        let c = forward_step(h, &cur, &cols[y as usize], &mut next);
        if c <= 0.0 {
            return Err(zero_likelihood(t));
        }
        next.iter_mut().for_each(|v| *v /= c);
        ll.add(c.ln());
        std::mem::swap(&mut cur, &mut next);
    }
    Ok(ll.value())
}

/// Scaled forward pass storing every `alpha_t`, used by the re-estimation
/// code and [`forward_backward`].
pub(crate) fn forward_pass(h: &HmmModel, obs: &ObservationSeries, cols: &[Vec<f64>]) -> Result<(Vec<f64>, Vec<f64>, f64)> {
    h.check_observations(obs)?;
    let nt = h.lattice.triples();
    let t_len = obs.len();
    let mut alpha = vec![0.0; t_len * nt];
    let mut scale = vec![0.0; t_len];
    let mut ll = BlockSum::default();
    for (a, (r, p)) in alpha[..nt].iter_mut().zip(h.rho.iter().zip(&cols[obs.values[0] as usize])) {
        *a = r * p;
    }
    for t in 0..t_len {
        if t > 0 {
            let (done, rest) = alpha.split_at_mut(t * nt);
            forward_step(h, &done[(t - 1) * nt..], &cols[obs.values[t] as usize], &mut rest[..nt]);
        }
        let row = &mut alpha[t * nt..(t + 1) * nt];
        let c: f64 = row.iter().sum();
        if c <= 0.0 {
            return Err(zero_likelihood(t));
        }
        row.iter_mut().for_each(|v| *v /= c);
        scale[t] = c;
        ll.add(c.ln());
    }
    Ok((alpha, scale, ll.value()))
}

pub(crate) fn emission_columns(h: &HmmModel) -> Vec<Vec<f64>> {
    (0..=h.m_obs).map(|y| emission_column(h, y)).collect()
}

/// Backward step shared with re-estimation: given `beta_{t+1}` returns
/// `beta_t` into `out`, using scratch `w = psi(y_{t+1}) beta_{t+1} / c_{t+1}`.
pub(crate) fn backward_into(h: &HmmModel, beta_next: &[f64], psi_y: &[f64], c_next: f64, w: &mut [f64], out: &mut [f64]) {
    for ((wv, &b), &p) in w.iter_mut().zip(beta_next).zip(psi_y) {
        *wv = p * b / c_next;
    }
    backward_step(h, w, out);
}

pub fn forward_backward(h: &HmmModel, obs: &ObservationSeries) -> Result<ForwardBackward> {
    let cols = emission_columns(h);
    let (alpha, scale, log_likelihood) = forward_pass(h, obs, &cols)?;
    let nt = h.lattice.triples();
    let t_len = obs.len();
    let mut beta = vec![0.0; t_len * nt];
    beta[(t_len - 1) * nt..].iter_mut().for_each(|b| *b = 1.0);
    let mut w = vec![0.0; nt];
    for t in (0..t_len - 1).rev() {
        let (head, tail) = beta.split_at_mut((t + 1) * nt);
        backward_into(h, &tail[..nt], &cols[obs.values[t + 1] as usize], scale[t + 1], &mut w, &mut head[t * nt..]);
    }
    Ok(ForwardBackward { n_triples: nt, alpha, beta, scale, log_likelihood })
}
