//! Numerical solution of the forward Kolmogorov equations and of the closed
//! moment system. This is the reference the Monte Carlo estimators are
//! checked against.
//!
//! Transition probabilities between states of an `N` box are computed on a
//! padded box large enough that mass escaping it is negligible, so entries
//! inside the `N` box are the true (untruncated) transition probabilities.
//! Rows of the returned tensors are therefore short of 1 by exactly the
//! probability of ending outside the `N` box; correcting that is left to
//! [`crate::skeleton`].

use std::io::Write;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::lattice::Lattice;
use crate::ode::{integrate, Tolerance};
use crate::params::{EiState, ModelParams, TruncationConfig};
use crate::sim::{Dynamics, EventKind};

/// Escaped mass above which a padded solve is considered failed.
pub const MAX_LEAK: f64 = 1e-6;
/// Escaped mass the padding search aims for.
const TARGET_LEAK: f64 = 1e-10;
const PADDINGS: [u32; 5] = [4, 8, 16, 32, 64];

#[derive(Debug, Clone, Serialize)]
pub struct TransitionTensor {
    pub dt: f64,
    pub lattice: Lattice,
    /// `pairs x pairs`, row = start state.
    probs: Vec<f64>,
    /// Largest mass that escaped the padded integration box.
    pub integration_leak: f64,
}

impl TransitionTensor {
    pub fn n_state(&self) -> u32 {
        self.lattice.i_max
    }

    pub fn get(&self, from: EiState, to: EiState) -> f64 {
        let n = self.lattice.pairs();
        self.probs[self.lattice.pair_index(from) * n + self.lattice.pair_index(to)]
    }

    pub fn row(&self, from: EiState) -> &[f64] {
        let n = self.lattice.pairs();
        let k = self.lattice.pair_index(from);
        &self.probs[k * n..(k + 1) * n]
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    /// Probability of ending outside the box.
    pub fn row_deficit(&self, from: EiState) -> f64 {
        1.0 - self.row(from).iter().sum::<f64>()
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

#[derive(Debug, Clone, Serialize)]
pub struct JointTransitionTensor {
    pub dt: f64,
    pub lattice: Lattice,
    pub m_obs: u32,
    /// `pairs x pairs x (m_obs + 1)`.
    probs: Vec<f64>,
    pub integration_leak: f64,
    /// Per start state, probability that the window count exceeds `m_obs`.
    pub y_overflow: Vec<f64>,
}

impl JointTransitionTensor {
    fn y_levels(&self) -> usize {
        self.m_obs as usize + 1
    }

    pub fn get(&self, from: EiState, to: EiState, y: u32) -> f64 {
        let n = self.lattice.pairs();
        let yl = self.y_levels();
        let k = self.lattice.pair_index(from);
        let l = self.lattice.pair_index(to);
        self.probs[(k * n + l) * yl + y as usize]
    }

    /// `sum_y p(from, to, y)` as a `pairs x pairs` array.
    pub fn marginal(&self) -> Vec<f64> {
        self.probs.chunks(self.y_levels()).map(|c| c.iter().sum()).collect()
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["e", "i", "e_to", "i_to", "y", "prob"])?;
        for from in self.lattice.states() {
            for to in self.lattice.states() {
                for y in 0..=self.m_obs {
                    out.write_record([
                        from.e.to_string(),
                        from.i.to_string(),
                        to.e.to_string(),
                        to.i.to_string(),
                        y.to_string(),
                        self.get(from, to, y).to_string(),
                    ])?;
                }
            }
        }
        out.flush()?;
        Ok(())
    }
}

/// Generator of the chain restricted to a box, optionally augmented with a
/// window-count coordinate (`y_levels > 1`, last level absorbing overflow).
struct BoxGenerator {
    lattice: Lattice,
    exit: Vec<f64>,
    moves: Vec<(usize, usize, f64)>,
}

impl BoxGenerator {
    fn new<D: Dynamics + ?Sized>(d: &D, lattice: Lattice, y_levels: usize) -> Self {
        let kinds = d.kinds();
        let mut exit = Vec::with_capacity(lattice.pairs() * y_levels);
        let mut moves = Vec::new();
        for s in lattice.states() {
            let rates = d.rates(s);
            let total: f64 = rates.iter().sum();
            for y in 0..y_levels {
                let from = lattice.pair_index(s) * y_levels + y;
                exit.push(total);
                for (kind, &rate) in kinds.iter().zip(&rates) {
                    if rate <= 0.0 {
                        continue;
                    }
                    let t = kind.apply(s);
                    if !lattice.contains(t) {
                        continue;
                    }
                    let y_to = if *kind == EventKind::Isolation { (y + 1).min(y_levels - 1) } else { y };
                    moves.push((from, lattice.pair_index(t) * y_levels + y_to, rate));
                }
            }
        }
        Self { lattice, exit, moves }
    }

    fn len(&self) -> usize {
        self.exit.len()
    }

    /// `out = p Q` for every row block of `p`.
    fn apply(&self, p: &[f64], out: &mut [f64]) {
        let n = self.len();
        for (pr, or) in p.chunks_exact(n).zip(out.chunks_exact_mut(n)) {
            for k in 0..n {
                or[k] = -self.exit[k] * pr[k];
            }
            for &(from, to, rate) in &self.moves {
                or[to] += rate * pr[from];
            }
        }
    }
}

fn padded(lattice: Lattice, pad: u32) -> Lattice {
    // A frozen coordinate stays frozen.
    let e_max = if lattice.e_max == 0 { 0 } else { lattice.e_max + pad };
    Lattice::new(e_max, lattice.i_max + pad)
}

fn check_dt(dt: f64) -> Result<()> {
    if !dt.is_finite() || dt <= 0.0 {
        return Err(Error::InvalidConfig(format!("dt must be positive, got {dt}")));
    }
    Ok(())
}

/// Solves on growing padded boxes; returns the padded box, the end-of-window
/// probabilities for every start state of `lattice`, and the escaped mass.
fn solve_padded<D: Dynamics + ?Sized>(
    d: &D,
    lattice: Lattice,
    y_levels: usize,
    dt: f64,
) -> Result<(BoxGenerator, Vec<f64>, f64)> {
    check_dt(dt)?;
    let mut last = None;
    for pad in PADDINGS {
        let gen = BoxGenerator::new(d, padded(lattice, pad), y_levels);
        let n = gen.len();
        let starts: Vec<EiState> = lattice.states().collect();
        let mut y = vec![0.0; starts.len() * n];
        for (r, s) in starts.iter().enumerate() {
            y[r * n + gen.lattice.pair_index(*s) * y_levels] = 1.0;
        }
        integrate(|_, p, dp| gen.apply(p, dp), 0.0, &mut y, &[dt], Tolerance::default(), |_, _| {})?;
        let leak = y
            .chunks_exact(n)
            .map(|row| 1.0 - row.iter().sum::<f64>())
            .fold(0.0, f64::max);
        if leak < TARGET_LEAK {
            return Ok((gen, y, leak));
        }
        last = Some((gen, y, leak));
    }
    let (gen, y, leak) = last.unwrap();
    if leak > MAX_LEAK {
        return Err(Error::LeakedMass { leak });
    }
    log::warn!("padded master equation still leaks {leak:.3e}");
    Ok((gen, y, leak))
}

pub fn transition_tensor<D: Dynamics + ?Sized>(d: &D, lattice: Lattice, dt: f64) -> Result<TransitionTensor> {
    let (gen, y, leak) = solve_padded(d, lattice, 1, dt)?;
    let n = gen.len();
    let pairs = lattice.pairs();
    let mut probs = vec![0.0; pairs * pairs];
    for (r, row) in y.chunks_exact(n).enumerate() {
        for (c, to) in lattice.states().enumerate() {
            probs[r * pairs + c] = row[gen.lattice.pair_index(to)];
        }
    }
    Ok(TransitionTensor { dt, lattice, probs, integration_leak: leak })
}

pub fn joint_transition_tensor<D: Dynamics + ?Sized>(
    d: &D,
    lattice: Lattice,
    m_obs: u32,
    dt: f64,
) -> Result<JointTransitionTensor> {
    let yl = m_obs as usize + 1;
    let (gen, y, leak) = solve_padded(d, lattice, yl + 1, dt)?;
    let n = gen.len();
    let pairs = lattice.pairs();
    let mut probs = vec![0.0; pairs * pairs * yl];
    let mut y_overflow = vec![0.0; pairs];
    for (r, row) in y.chunks_exact(n).enumerate() {
        for (c, to) in lattice.states().enumerate() {
            let base = gen.lattice.pair_index(to) * (yl + 1);
            probs[(r * pairs + c) * yl..(r * pairs + c + 1) * yl].copy_from_slice(&row[base..base + yl]);
        }
        y_overflow[r] = gen.lattice.states().map(|s| row[gen.lattice.pair_index(s) * (yl + 1) + yl]).sum();
    }
    Ok(JointTransitionTensor { dt, lattice, m_obs, probs, integration_leak: leak, y_overflow })
}

/// Transition probabilities over one window between states of the `N` box.
pub fn solve_kolmogorov(p: &ModelParams, trunc: TruncationConfig, dt: f64) -> Result<TransitionTensor> {
    p.validate()?;
    transition_tensor(p, Lattice::square(trunc.n_state), dt)
}

/// Joint probabilities of the next state and the window's isolation count.
pub fn solve_joint_kolmogorov(
    p: &ModelParams,
    trunc: TruncationConfig,
    dt: f64,
) -> Result<JointTransitionTensor> {
    p.validate()?;
    joint_transition_tensor(p, Lattice::square(trunc.n_state), trunc.m_obs, dt)
}

/// First and second moments along a time grid.
#[derive(Debug, Clone, Serialize)]
pub struct MomentCurve {
    pub times: Vec<f64>,
    /// `E[E_t]`
    pub e: Vec<f64>,
    /// `E[I_t]`
    pub i: Vec<f64>,
    /// `E[Y_(0,t]]`
    pub y: Vec<f64>,
    /// `E[E_t^2]`
    pub ee: Vec<f64>,
    /// `E[E_t I_t]`
    pub ei: Vec<f64>,
    /// `E[I_t^2]`
    pub ii: Vec<f64>,
}

pub fn solve_moment_odes(p: &ModelParams, initial: EiState, horizon: f64) -> Result<MomentCurve> {
    if !horizon.is_finite() || horizon <= 0.0 {
        return Err(Error::InvalidConfig(format!("horizon must be positive, got {horizon}")));
    }
    let times: Vec<f64> = (0..=1000).map(|k| horizon * k as f64 / 1000.0).collect();
    solve_moment_odes_at(p, initial, &times)
}

pub fn solve_moment_odes_at(p: &ModelParams, initial: EiState, times: &[f64]) -> Result<MomentCurve> {
    p.validate()?;
    let ModelParams { lambda, mu, alpha, nu } = *p;
    let (e0, i0) = (f64::from(initial.e), f64::from(initial.i));
    let mut state = vec![e0, i0, 0.0, e0 * e0, e0 * i0, i0 * i0];
    let mut curve = MomentCurve {
        times: Vec::with_capacity(times.len()),
        e: Vec::new(),
        i: Vec::new(),
        y: Vec::new(),
        ee: Vec::new(),
        ei: Vec::new(),
        ii: Vec::new(),
    };
    integrate(
        |_, m, dm| {
            let [e, i, _y, ee, ei, ii] = [m[0], m[1], m[2], m[3], m[4], m[5]];
            dm[0] = -alpha * e + lambda * i + nu;
            dm[1] = alpha * e - mu * i;
            dm[2] = mu * i;
            dm[3] = (2.0 * nu + alpha) * e + lambda * i - 2.0 * alpha * ee + 2.0 * lambda * ei + nu;
            dm[4] = -alpha * e + nu * i + alpha * ee - (mu + alpha) * ei + lambda * ii;
            dm[5] = alpha * e + mu * i + 2.0 * alpha * ei - 2.0 * mu * ii;
        },
        0.0,
        &mut state,
        times,
        Tolerance::default(),
        |t, m| {
            curve.times.push(t);
            curve.e.push(m[0]);
            curve.i.push(m[1]);
            curve.y.push(m[2]);
            curve.ee.push(m[3]);
            curve.ei.push(m[4]);
            curve.ii.push(m[5]);
        },
    )?;
    Ok(curve)
}

/// Slowest decay rate of the first moments towards their limits.
pub fn relaxation_rate(p: &ModelParams) -> f64 {
    let (mu, alpha, lambda) = (p.mu, p.alpha, p.lambda);
    (mu + alpha - ((mu - alpha).powi(2) + 4.0 * alpha * lambda).sqrt()) / 2.0
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::moments::limit_moments;
    use crate::sim::mc_moments;

    fn baseline() -> ModelParams {
        ModelParams::new(0.05, 0.2, 0.1, 0.015).unwrap()
    }

    #[test]
    fn near_identity_for_tiny_window() {
        let t = solve_kolmogorov(&baseline(), TruncationConfig::new(3, 2).unwrap(), 1e-6).unwrap();
        for from in t.lattice.states() {
            for to in t.lattice.states() {
                let want = if from == to { 1.0 } else { 0.0 };
                assert!((t.get(from, to) - want).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn padding_keeps_integration_leak_small() {
        let t = solve_kolmogorov(&baseline(), TruncationConfig::new(3, 2).unwrap(), 1.0).unwrap();
        assert!(t.integration_leak < 1e-8);
        // Low rows keep their mass inside the box, edge rows do not.
        assert!(t.row_deficit(EiState::ORIGIN) < 1e-6);
        for s in [EiState::new(1, 0), EiState::new(0, 1), EiState::new(1, 1)] {
            assert!(t.row_deficit(s) < 1e-4, "{s:?}: {}", t.row_deficit(s));
        }
        assert!(t.row_deficit(EiState::new(3, 3)) > 0.05, "{}", t.row_deficit(EiState::new(3, 3)));
        assert!(t.probs().iter().all(|&x| (-1e-12..=1.0 + 1e-12).contains(&x)));
    }

    #[test]
    fn rejects_bad_window() {
        assert!(solve_kolmogorov(&baseline(), TruncationConfig::new(3, 2).unwrap(), 0.0).is_err());
    }

    #[test]
    fn semigroup_on_low_states() {
        let trunc = TruncationConfig::new(8, 2).unwrap();
        let one = solve_kolmogorov(&baseline(), trunc, 1.0).unwrap();
        let two = solve_kolmogorov(&baseline(), trunc, 2.0).unwrap();
        let lat = one.lattice;
        for from in lat.states().filter(|s| s.e <= 2 && s.i <= 2) {
            for to in lat.states().filter(|s| s.e <= 2 && s.i <= 2) {
                let composed: f64 = lat.states().map(|mid| one.get(from, mid) * one.get(mid, to)).sum();
                assert!((composed - two.get(from, to)).abs() < 1e-6, "{from:?} -> {to:?}");
            }
        }
    }

    #[test]
    fn joint_initial_condition_and_support() {
        let trunc = TruncationConfig::new(3, 3).unwrap();
        let j0 = solve_joint_kolmogorov(&baseline(), trunc, 1e-9).unwrap();
        for from in j0.lattice.states() {
            for to in j0.lattice.states() {
                for y in 0..=3 {
                    let want = if from == to && y == 0 { 1.0 } else { 0.0 };
                    assert!((j0.get(from, to, y) - want).abs() < 1e-7);
                }
            }
        }
        let j = solve_joint_kolmogorov(&baseline(), trunc, 1.0).unwrap();
        for from in j.lattice.states() {
            for to in j.lattice.states() {
                for y in 0..=3 {
                    if from.i > to.i + y {
                        assert_eq!(j.get(from, to, y), 0.0, "{from:?} -> {to:?}, y = {y}");
                    }
                }
            }
        }
        assert_eq!(j.get(EiState::new(1, 2), EiState::new(0, 0), 1), 0.0);
    }

    #[test]
    fn joint_marginalizes_to_transition_tensor() {
        let trunc = TruncationConfig::new(3, 6).unwrap();
        let j = solve_joint_kolmogorov(&baseline(), trunc, 1.0).unwrap();
        let t = solve_kolmogorov(&baseline(), trunc, 1.0).unwrap();
        assert!(j.y_overflow.iter().all(|&o| o < 1e-8));
        for (a, b) in j.marginal().iter().zip(t.probs()) {
            assert!((a - b).abs() < 1e-8);
        }
    }

    #[test]
    fn moment_curve_reaches_limits() {
        let p = baseline();
        let c = solve_moment_odes(&p, EiState::ORIGIN, 1e4).unwrap();
        let lim = limit_moments(&p).unwrap();
        let last = c.times.len() - 1;
        assert!((c.e[last] - lim.e_star).abs() < 1e-7);
        assert!((c.i[last] - lim.i_star).abs() < 1e-7);
        assert!((c.ei[last] - lim.r_star).abs() < 1e-7);
        let rate = (c.y[last] - c.y[last - 1]) / (c.times[last] - c.times[last - 1]);
        assert!((rate - lim.n_star).abs() < 1e-8);
        assert!((c.ei[last] - 0.0422222).abs() < 1e-6);
    }

    #[test]
    fn moment_curve_invariants() {
        let c = solve_moment_odes(&baseline(), EiState::new(2, 1), 500.0).unwrap();
        for k in 0..c.times.len() {
            assert!(c.e[k] >= 0.0 && c.i[k] >= 0.0 && c.y[k] >= 0.0);
            assert!(c.ee[k] >= c.e[k] * c.e[k] - 1e-10);
            assert!(c.ii[k] >= c.i[k] * c.i[k] - 1e-10);
            if k > 0 {
                assert!(c.y[k] >= c.y[k - 1]);
            }
        }
    }

    #[test]
    fn zero_immigration_gives_zero_curve() {
        let p = ModelParams::new(0.05, 0.2, 0.1, 0.0).unwrap();
        let c = solve_moment_odes(&p, EiState::ORIGIN, 100.0).unwrap();
        for v in [&c.e, &c.i, &c.y, &c.ee, &c.ei, &c.ii] {
            assert!(v.iter().all(|&x| x == 0.0));
        }
    }

    #[test]
    fn tail_decays_at_slowest_eigenvalue() {
        let p = baseline();
        let lim = limit_moments(&p).unwrap();
        let times: Vec<f64> = (0..=30).map(|k| 60.0 + 5.0 * k as f64).collect();
        let c = solve_moment_odes_at(&p, EiState::ORIGIN, &times).unwrap();
        let xs = &c.times;
        let ys: Vec<f64> = c.e.iter().map(|e| (lim.e_star - e).abs().ln()).collect();
        let (mx, my) = (xs.iter().sum::<f64>() / xs.len() as f64, ys.iter().sum::<f64>() / ys.len() as f64);
        let slope = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum::<f64>()
            / xs.iter().map(|x| (x - mx).powi(2)).sum::<f64>();
        let c_true = relaxation_rate(&p);
        assert!((-slope - c_true).abs() < 0.05 * c_true, "fitted {} vs {c_true}", -slope);
    }

    #[test]
    fn moment_curve_matches_simulation() {
        let p = baseline();
        let c = solve_moment_odes_at(&p, EiState::ORIGIN, &[10.0, 100.0]).unwrap();
        for (k, h) in [10.0, 100.0].into_iter().enumerate() {
            let mc = mc_moments(&p, EiState::ORIGIN, h, 10_000, 42 + k as u64).unwrap();
            assert!(mc.e.covers(c.e[k], 3.0), "t = {h}: {:?} vs {}", mc.e, c.e[k]);
            assert!(mc.i.covers(c.i[k], 3.0), "t = {h}: {:?} vs {}", mc.i, c.i[k]);
            assert!(mc.ei.covers(c.ei[k], 3.0), "t = {h}: {:?} vs {}", mc.ei, c.ei[k]);
            assert!(mc.n_rate.covers(c.y[k] / h, 3.0), "t = {h}");
        }
    }
}
