//! One-compartment baseline: linear birth-death process with immigration.
//! Infection goes straight to `I`; the exposed coordinate is frozen at zero
//! so the shared skeleton and HMM code apply unchanged.

use serde::{Deserialize, Serialize};

use crate::baum_welch::{chain_limit_moments, fit_family, FitConfig, FitResult};
use crate::error::{Error, Result};
use crate::lattice::Lattice;
use crate::params::EiState;
use crate::sim::{simulate_dynamics, Dynamics, EventKind, ObservationSeries, Trajectory};
use crate::skeleton::{estimate_skeleton_dynamics, ChainMoments};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LbdiParams {
    /// Birth (contamination) rate per infected.
    pub lambda: f64,
    /// Death (isolation) rate per infected.
    pub mu: f64,
    /// Immigration rate.
    pub nu: f64,
}

impl LbdiParams {
    pub fn new(lambda: f64, mu: f64, nu: f64) -> Result<Self> {
        let p = Self { lambda, mu, nu };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("lambda", self.lambda), ("mu", self.mu), ("nu", self.nu)] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::InvalidParams(format!("{name} must be finite and nonnegative, got {v}")));
            }
        }
        Ok(())
    }

    pub fn is_stable(&self) -> bool {
        self.lambda < self.mu
    }
}

impl Dynamics for LbdiParams {
    fn kinds(&self) -> [EventKind; 3] {
        [EventKind::Arrival, EventKind::Isolation, EventKind::Arrival]
    }

    fn rates(&self, s: EiState) -> [f64; 3] {
        let i = f64::from(s.i);
        [self.lambda * i + self.nu, self.mu * i, 0.0]
    }
}

pub fn lbdi_simulate(p: &LbdiParams, i0: u32, horizon: f64, seed: u64) -> Result<Trajectory> {
    p.validate()?;
    simulate_dynamics(p, EiState::new(0, i0), horizon, seed)
}

/// Stationary mean and second moment of `I`, and the long-run death rate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LbdiMoments {
    pub i_star: f64,
    pub i2_star: f64,
    pub n_star: f64,
}

impl LbdiMoments {
    pub fn variance(&self) -> f64 {
        self.i2_star - self.i_star * self.i_star
    }
}

pub fn lbdi_limit_moments(p: &LbdiParams) -> Result<LbdiMoments> {
    p.validate()?;
    if !p.is_stable() {
        return Err(Error::Unstable { lambda: p.lambda, mu: p.mu });
    }
    let gap = p.mu - p.lambda;
    let i_star = p.nu / gap;
    let var = p.mu * p.nu / (gap * gap);
    Ok(LbdiMoments { i_star, i2_star: var + i_star * i_star, n_star: p.mu * i_star })
}

/// `mu = N*/I*`, `mu - lambda = N*/Var(I)`, `nu = I* (mu - lambda)`.
pub fn invert_lbdi_moments(m: &LbdiMoments) -> Result<LbdiParams> {
    let reject = |reason: &str| Error::MomentInversion {
        reason: reason.into(),
        moments: format!("I* = {}, E[I^2]* = {}, N* = {}", m.i_star, m.i2_star, m.n_star),
    };
    if !(m.i_star > 0.0 && m.n_star > 0.0) {
        return Err(reject("I* and N* must be positive"));
    }
    let var = m.variance();
    if !(var > 0.0) {
        return Err(reject("variance of I must be positive"));
    }
    let mu = m.n_star / m.i_star;
    let gap = m.n_star / var;
    let lambda = mu - gap;
    if lambda < 0.0 {
        return Err(reject("negative birth rate"));
    }
    LbdiParams::new(lambda, mu, m.i_star * gap)
}

/// Multi-start fit of the one-compartment model on `(I_{n-1}, I_n)`.
pub fn lbdi_fit(obs: &ObservationSeries, cfg: &FitConfig) -> Result<FitResult<LbdiParams>> {
    let lattice = Lattice::new(0, cfg.n_state);
    fit_family(
        obs,
        cfg,
        lattice,
        |rng| {
            let p = cfg.init_ranges.draw(rng);
            LbdiParams { lambda: p.lambda, mu: p.mu, nu: p.nu }
        },
        |p: &LbdiParams, trunc, seed| estimate_skeleton_dynamics(p, lattice, trunc.m_obs, cfg.dt, cfg.sampling, seed),
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LbdiReport {
    pub params: LbdiParams,
    pub moments: LbdiMoments,
    pub chain_moments: ChainMoments,
    pub chain_steps: usize,
    pub fit: FitResult<LbdiParams>,
}

pub fn lbdi_estimate(obs: &ObservationSeries, cfg: &FitConfig, chain_steps: usize, seed: u64) -> Result<LbdiReport> {
    lbdi_estimate_from_fit(lbdi_fit(obs, cfg)?, cfg.dt, chain_steps, seed)
}

pub fn lbdi_estimate_from_fit(fit: FitResult<LbdiParams>, dt: f64, chain_steps: usize, seed: u64) -> Result<LbdiReport> {
    let cm = chain_limit_moments(&fit.model, dt, chain_steps, seed)?;
    let moments = LbdiMoments { i_star: cm.i.mean, i2_star: cm.ii.mean, n_star: cm.n_rate.map_or(0.0, |n| n.mean) };
    let params = invert_lbdi_moments(&moments)?;
    Ok(LbdiReport { params, moments, chain_moments: cm, chain_steps, fit })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ode::{integrate, Tolerance};
    use crate::sim::simulate_skeleton_path;

    fn rel(a: f64, b: f64) -> f64 {
        (a - b).abs() / b.abs()
    }

    /// Limits of `E[I_t]`, `E[I_t^2]` and `E[Y_(0,t]]/t` by integrating the
    /// moment equations of the process to a long horizon.
    fn ode_limits(p: &LbdiParams) -> LbdiMoments {
        let (l, m, n) = (p.lambda, p.mu, p.nu);
        let mut y = vec![0.0, 0.0, 0.0];
        let h = 2e4;
        let mut rate = 0.0;
        integrate(
            |_, v, dv| {
                dv[0] = (l - m) * v[0] + n;
                dv[1] = 2.0 * (l - m) * v[1] + (l + m + 2.0 * n) * v[0] + n;
                dv[2] = m * v[0];
            },
            0.0,
            &mut y,
            &[h],
            Tolerance { atol: 1e-14, rtol: 1e-12 },
            |_, v| rate = m * v[0],
        )
        .unwrap();
        LbdiMoments { i_star: y[0], i2_star: y[1], n_star: rate }
    }

    #[test]
    fn limits_match_moment_equations() {
        for p in [LbdiParams::new(0.05, 0.5, 0.01).unwrap(), LbdiParams::new(0.3, 0.4, 0.2).unwrap()] {
            let exact = lbdi_limit_moments(&p).unwrap();
            let ode = ode_limits(&p);
            assert!(rel(exact.i_star, ode.i_star) < 1e-8);
            assert!(rel(exact.i2_star, ode.i2_star) < 1e-8, "{exact:?} {ode:?}");
            assert!(rel(exact.n_star, ode.n_star) < 1e-8);
            let back = invert_lbdi_moments(&ode).unwrap();
            assert!(rel(back.lambda, p.lambda) < 1e-6);
            assert!(rel(back.mu, p.mu) < 1e-8);
            assert!(rel(back.nu, p.nu) < 1e-6);
        }
        let m = lbdi_limit_moments(&LbdiParams::new(0.05, 0.5, 0.01).unwrap()).unwrap();
        assert!((m.n_star - 0.0111111).abs() < 1e-7);
    }

    #[test]
    fn zero_moments_are_rejected() {
        assert!(invert_lbdi_moments(&LbdiMoments { i_star: 0.0, i2_star: 0.0, n_star: 0.0 }).is_err());
        // Variance below the mean would need a negative birth rate.
        assert!(invert_lbdi_moments(&LbdiMoments { i_star: 0.1, i2_star: 0.105, n_star: 0.05 }).is_err());
    }

    #[test]
    fn simulation_basics() {
        let t = lbdi_simulate(&LbdiParams::new(0.05, 0.5, 0.0).unwrap(), 0, 100.0, 1).unwrap();
        assert!(t.events.is_empty());
        let p = LbdiParams::new(0.05, 0.5, 0.01).unwrap();
        let a = lbdi_simulate(&p, 0, 1e3, 3).unwrap();
        assert_eq!(a, lbdi_simulate(&p, 0, 1e3, 3).unwrap());
        assert!(a.events.iter().all(|e| e.state.e == 0));
    }

    #[test]
    fn long_run_rate() {
        let p = LbdiParams::new(0.05, 0.5, 0.01).unwrap();
        let t = lbdi_simulate(&p, 0, 1e5, 5).unwrap();
        let rate = t.cumulative_isolations as f64 / 1e5;
        // Counts are overdispersed by roughly 1/(1 - lambda/mu)^2 over a Poisson.
        let sd = (0.0111 * 1.3 / 1e5f64).sqrt();
        assert!((rate - 0.0111111).abs() < 4.0 * sd, "{rate}");
    }

    #[test]
    fn reduced_model_has_structural_zeros() {
        let p = LbdiParams::new(0.05, 0.5, 0.01).unwrap();
        let path = simulate_skeleton_path(&p, EiState::ORIGIN, 3000.0, 1.0, 2).unwrap();
        let cfg = FitConfig {
            starts: 2,
            max_iter: 5,
            n_state: 3,
            init_ranges: crate::baum_welch::InitRanges::around(&crate::ModelParams::new(0.05, 0.5, 2.0, 0.01).unwrap(), 0.2),
            ..Default::default()
        };
        let fit = lbdi_fit(&path.observations, &cfg).unwrap();
        let h = &fit.model;
        assert_eq!(h.lattice.triples(), 16);
        for x in h.lattice.augmented_states() {
            for x2 in h.lattice.augmented_states() {
                if x2.i != x.j {
                    assert_eq!(h.q(x, x2), 0.0);
                }
            }
        }
        assert!(h.max_row_error() < 1e-10);
    }
}
