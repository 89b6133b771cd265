//! Closed-form limit moments and their inversion to model parameters.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ModelParams;
use crate::sim::McMoments;

/// Stationary means of `E`, `I`, `E*I` and the long-run isolation rate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LimitMoments {
    pub e_star: f64,
    pub i_star: f64,
    pub r_star: f64,
    pub n_star: f64,
}

impl LimitMoments {
    pub fn new(e_star: f64, i_star: f64, r_star: f64, n_star: f64) -> Self {
        Self { e_star, i_star, r_star, n_star }
    }

    fn describe(&self) -> String {
        format!(
            "E* = {}, I* = {}, R* = {}, N* = {}",
            self.e_star, self.i_star, self.r_star, self.n_star
        )
    }
}

pub fn limit_moments(p: &ModelParams) -> Result<LimitMoments> {
    p.validate()?;
    if !p.is_stable() {
        return Err(Error::Unstable { lambda: p.lambda, mu: p.mu });
    }
    if p.alpha <= 0.0 {
        return Err(Error::InvalidParams("alpha must be positive for E* to exist".into()));
    }
    let ModelParams { lambda, mu, alpha, nu } = *p;
    let gap = mu - lambda;
    Ok(LimitMoments {
        e_star: mu * nu / (alpha * gap),
        i_star: nu / gap,
        r_star: mu * nu * ((mu + alpha) * nu + alpha * lambda) / (alpha * gap * gap * (mu + alpha)),
        n_star: mu * nu / gap,
    })
}

pub fn invert_moments(m: &LimitMoments) -> Result<ModelParams> {
    let reject = |reason: &str| Error::MomentInversion { reason: reason.into(), moments: m.describe() };
    let LimitMoments { e_star, i_star, r_star, n_star } = *m;
    if ![e_star, i_star, r_star, n_star].iter().all(|x| x.is_finite()) {
        return Err(reject("non-finite moment"));
    }
    if e_star <= 0.0 || i_star <= 0.0 {
        return Err(reject("E* * I* must be positive"));
    }
    if n_star <= 0.0 {
        return Err(reject("N* must be positive"));
    }
    let r = r_star / (e_star * i_star) - 1.0;
    let s = e_star + i_star;
    let lambda = n_star * r * s / (i_star * (1.0 + r * s));
    let mu = n_star / i_star;
    let alpha = n_star / e_star;
    if !lambda.is_finite() || lambda < 0.0 {
        return Err(reject("negative exposure rate"));
    }
    if lambda >= mu {
        return Err(reject("exposure rate not below isolation rate"));
    }
    let nu = i_star * (mu - lambda);
    ModelParams::new(lambda, mu, alpha, nu).map_err(|e| reject(&e.to_string()))
}

/// Empirical limit moments: pooled point values plus one `N*` sample per
/// replica.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmpiricalMoments {
    pub point: LimitMoments,
    pub n_star_samples: Vec<f64>,
}

impl From<&McMoments> for EmpiricalMoments {
    fn from(mc: &McMoments) -> Self {
        Self {
            point: LimitMoments::new(mc.e.mean, mc.i.mean, mc.ei.mean, mc.n_rate.mean),
            n_star_samples: mc.n_rate_samples.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub lower: f64,
    pub upper: f64,
}

impl Interval {
    pub fn contains(&self, x: f64) -> bool {
        self.lower <= x && x <= self.upper
    }

    pub fn width(&self) -> f64 {
        self.upper - self.lower
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ParamIntervals {
    pub lambda: Interval,
    pub mu: Interval,
    pub alpha: Interval,
    pub nu: Interval,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamEstimates {
    pub lambda: f64,
    pub mu: f64,
    pub alpha: f64,
    pub nu: f64,
    pub ci: ParamIntervals,
    pub rejected_fraction: f64,
}

impl ParamEstimates {
    pub fn params(&self) -> ModelParams {
        ModelParams { lambda: self.lambda, mu: self.mu, alpha: self.alpha, nu: self.nu }
    }
}

/// Linear-interpolation quantile of sorted data.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    debug_assert!(!sorted.is_empty());
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Point estimates from the pooled moments; 95% intervals from the spread
/// of `N*` alone, with `E*`, `I*`, `R*` held at their point values.
pub fn plugin_estimate(emp: &EmpiricalMoments) -> Result<ParamEstimates> {
    let point = invert_moments(&emp.point)?;
    let mut cols: [Vec<f64>; 4] = Default::default();
    let mut rejected = 0usize;
    for &n in &emp.n_star_samples {
        match invert_moments(&LimitMoments { n_star: n, ..emp.point }) {
            Ok(p) => {
                for (c, v) in cols.iter_mut().zip([p.lambda, p.mu, p.alpha, p.nu]) {
                    c.push(v);
                }
            }
            Err(_) => rejected += 1,
        }
    }
    let total = emp.n_star_samples.len();
    if total > 0 && rejected == total {
        return Err(Error::MomentInversion {
            reason: "every N* sample was rejected".into(),
            moments: emp.point.describe(),
        });
    }
    let point_vals = [point.lambda, point.mu, point.alpha, point.nu];
    let mut ci = [Interval { lower: 0.0, upper: 0.0 }; 4];
    for (k, c) in cols.iter_mut().enumerate() {
        if c.is_empty() {
            ci[k] = Interval { lower: point_vals[k], upper: point_vals[k] };
        } else {
            c.sort_by(f64::total_cmp);
            ci[k] = Interval { lower: quantile(c, 0.025), upper: quantile(c, 0.975) };
        }
    }
    Ok(ParamEstimates {
        lambda: point.lambda,
        mu: point.mu,
        alpha: point.alpha,
        nu: point.nu,
        ci: ParamIntervals { lambda: ci[0], mu: ci[1], alpha: ci[2], nu: ci[3] },
        rejected_fraction: if total == 0 { 0.0 } else { rejected as f64 / total as f64 },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::master_eq::solve_moment_odes_at;
    use crate::params::EiState;
    use proptest::prelude::*;

    fn rel(a: f64, b: f64) -> f64 {
        (a - b).abs() / b.abs().max(1e-300)
    }

    #[test]
    fn reference_limits() {
        let m = limit_moments(&ModelParams::new(0.05, 0.2, 0.1, 0.015).unwrap()).unwrap();
        assert!(rel(m.e_star, 0.2) < 1e-12);
        assert!(rel(m.i_star, 0.1) < 1e-12);
        assert!(rel(m.r_star, 0.19 / 4.5) < 1e-12);
        assert!(rel(m.n_star, 0.02) < 1e-12);
    }

    #[test]
    fn fast_incubation_limits_match_ode() {
        let p = ModelParams::new(0.05, 0.5, 2.0, 0.01).unwrap();
        let m = limit_moments(&p).unwrap();
        let c = solve_moment_odes_at(&p, EiState::ORIGIN, &[1e4]).unwrap();
        assert!(rel(m.e_star, c.e[0]) < 1e-6);
        assert!(rel(m.i_star, c.i[0]) < 1e-6);
        assert!(rel(m.r_star, c.ei[0]) < 1e-6);
        assert!(rel(m.n_star, c.y[0] / 1e4) < 1e-3);
        assert!(rel(m.e_star, 1.0 / 180.0) < 1e-12);
        assert!(rel(m.i_star, 1.0 / 45.0) < 1e-12);
        assert!(rel(m.n_star, 1.0 / 90.0) < 1e-12);
        assert!((m.r_star - 0.00061728).abs() < 1e-8);
    }

    #[test]
    fn no_immigration_no_moments() {
        let m = limit_moments(&ModelParams::new(0.05, 0.2, 0.1, 0.0).unwrap()).unwrap();
        assert_eq!(m, LimitMoments::new(0.0, 0.0, 0.0, 0.0));
        assert!(invert_moments(&m).is_err());
    }

    #[test]
    fn rejects_unstable_and_frozen() {
        assert!(matches!(
            limit_moments(&ModelParams::new(0.2, 0.2, 0.1, 0.01).unwrap()),
            Err(Error::Unstable { .. })
        ));
        assert!(limit_moments(&ModelParams::new(0.05, 0.2, 0.0, 0.01).unwrap()).is_err());
    }

    #[test]
    fn inverts_reference_values() {
        let p = invert_moments(&LimitMoments::new(0.2, 0.1, 0.19 / 4.5, 0.02)).unwrap();
        assert!(rel(p.lambda, 0.05) < 1e-12);
        assert!(rel(p.mu, 0.2) < 1e-12);
        assert!(rel(p.alpha, 0.1) < 1e-12);
        assert!(rel(p.nu, 0.015) < 1e-12);
    }

    #[test]
    fn inconsistent_moments_rejected() {
        // R* below E* I* implies a negative exposure rate.
        assert!(invert_moments(&LimitMoments::new(0.2, 0.1, 0.01, 0.02)).is_err());
        // Strong negative correlation with large means pushes lambda past mu.
        assert!(invert_moments(&LimitMoments::new(2.0, 1.0, 1.0, 0.02)).is_err());
        assert!(invert_moments(&LimitMoments::new(0.0, 0.1, 0.0, 0.02)).is_err());
    }

    #[test]
    fn exact_moments_give_zero_width_intervals() {
        let m = limit_moments(&ModelParams::new(0.05, 0.2, 0.1, 0.015).unwrap()).unwrap();
        let est = plugin_estimate(&EmpiricalMoments { point: m, n_star_samples: vec![m.n_star; 50] }).unwrap();
        assert!(rel(est.lambda, 0.05) < 1e-12);
        for iv in [est.ci.lambda, est.ci.mu, est.ci.alpha, est.ci.nu] {
            assert!(iv.width().abs() < 1e-15);
        }
        assert_eq!(est.rejected_fraction, 0.0);
    }

    #[test]
    fn intervals_scale_with_n_star() {
        let m = limit_moments(&ModelParams::new(0.05, 0.2, 0.1, 0.015).unwrap()).unwrap();
        let samples: Vec<f64> = (0..=100).map(|k| 0.018 + 0.004 * k as f64 / 100.0).collect();
        let est = plugin_estimate(&EmpiricalMoments { point: m, n_star_samples: samples }).unwrap();
        // Every parameter is proportional to N* when the other moments are fixed.
        assert!(rel(est.ci.mu.lower, 0.2 * 0.0181 / 0.02) < 1e-9);
        assert!(rel(est.ci.mu.upper, 0.2 * 0.0219 / 0.02) < 1e-9);
        assert!(est.ci.lambda.contains(est.lambda));
    }

    #[test]
    fn json_shape() {
        let m = limit_moments(&ModelParams::new(0.05, 0.2, 0.1, 0.015).unwrap()).unwrap();
        let est = plugin_estimate(&EmpiricalMoments { point: m, n_star_samples: vec![0.02, 0.021] }).unwrap();
        let v = serde_json::to_value(&est).unwrap();
        for key in ["lambda", "mu", "alpha", "nu", "ci", "rejected_fraction"] {
            assert!(v.get(key).is_some(), "{key}");
        }
        assert!(v["ci"]["nu"]["lower"].is_number());
    }

    #[test]
    fn quantile_interpolates() {
        let xs = [0.0, 1.0, 2.0, 3.0, 4.0];
        assert_eq!(quantile(&xs, 0.5), 2.0);
        assert_eq!(quantile(&xs, 0.125), 0.5);
        assert_eq!(quantile(&xs, 1.0), 4.0);
    }

    proptest! {
        #[test]
        fn round_trip(lambda in 0.01f64..0.15, gap in 0.001f64..0.45, alpha in 0.05f64..2.0, nu in 0.005f64..0.05) {
            let p = ModelParams::new(lambda, lambda + gap, alpha, nu).unwrap();
            let m = limit_moments(&p).unwrap();
            prop_assert!(rel(m.n_star, p.mu * m.i_star) < 1e-14);
            prop_assert!(rel(m.n_star, p.alpha * m.e_star) < 1e-14);
            let q = invert_moments(&m).unwrap();
            prop_assert!(q.lambda < q.mu);
            prop_assert!(rel(q.lambda, p.lambda) < 1e-12);
            prop_assert!(rel(q.mu, p.mu) < 1e-12);
            prop_assert!(rel(q.alpha, p.alpha) < 1e-12);
            prop_assert!(rel(q.nu, p.nu) < 1e-12);
        }

        #[test]
        fn never_returns_unstable(e in 0.001f64..1.0, i in 0.001f64..1.0, r in 0.0f64..2.0, n in 0.001f64..0.1) {
            if let Ok(p) = invert_moments(&LimitMoments::new(e, i, r, n)) {
                prop_assert!(p.lambda < p.mu);
                prop_assert!(p.lambda >= 0.0);
            }
        }
    }
}
