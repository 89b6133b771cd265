//! Domain types and the generator of the exposed-infected chain.
//!
//! From state `(e, i)` the chain jumps to
//! - `(e + 1, i)` at rate `lambda * i + nu` (exposure),
//! - `(e - 1, i + 1)` at rate `alpha * e` (incubation),
//! - `(e, i - 1)` at rate `mu * i` (isolation).

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// The four rates of the two-compartment model, all per unit time.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    /// Person-to-person contamination rate per infected.
    pub lambda: f64,
    /// Isolation rate per infected.
    pub mu: f64,
    /// Incubation rate per exposed.
    pub alpha: f64,
    /// Exogenous contamination rate.
    pub nu: f64,
}

impl ModelParams {
    pub fn new(lambda: f64, mu: f64, alpha: f64, nu: f64) -> Result<Self> {
        let p = Self { lambda, mu, alpha, nu };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda", self.lambda),
            ("mu", self.mu),
            ("alpha", self.alpha),
            ("nu", self.nu),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::InvalidParams(format!(
                    "{name} must be finite and nonnegative, got {v}"
                )));
            }
        }
        Ok(())
    }

    /// Stationary moments exist iff `lambda < mu`.
    pub fn is_stable(&self) -> bool {
        self.lambda < self.mu
    }

    pub fn from_json_file(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let p: Self = serde_json::from_str(&text)?;
        p.validate()?;
        Ok(p)
    }
}

/// Counts of exposed and infected individuals.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default, Serialize, Deserialize)]
pub struct EiState {
    pub e: u32,
    pub i: u32,
}

impl EiState {
    pub const ORIGIN: EiState = EiState { e: 0, i: 0 };

    pub const fn new(e: u32, i: u32) -> Self {
        Self { e, i }
    }
}

/// Hidden state `(E_{n-1}, I_{n-1}, I_n)` of the augmented chain.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AugmentedState {
    pub e: u32,
    pub i: u32,
    pub j: u32,
}

impl AugmentedState {
    pub const fn new(e: u32, i: u32, j: u32) -> Self {
        Self { e, i, j }
    }
}

/// Truncation bounds: `n_state` caps `e` and `i`, `m_obs` caps window counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TruncationConfig {
    pub n_state: u32,
    pub m_obs: u32,
}

impl TruncationConfig {
    pub fn new(n_state: u32, m_obs: u32) -> Result<Self> {
        if n_state < 1 || m_obs < 1 {
            return Err(Error::InvalidConfig(format!(
                "truncation bounds must be at least 1 (n_state = {n_state}, m_obs = {m_obs})"
            )));
        }
        Ok(Self { n_state, m_obs })
    }
}

/// Rates of the three possible jumps out of a state.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EventRates {
    pub exposure: f64,
    pub incubation: f64,
    pub isolation: f64,
}

impl EventRates {
    pub fn total(&self) -> f64 {
        self.exposure + self.incubation + self.isolation
    }
}

pub fn event_rates(s: EiState, p: &ModelParams) -> EventRates {
    let e = f64::from(s.e);
    let i = f64::from(s.i);
    EventRates {
        exposure: p.lambda * i + p.nu,
        incubation: p.alpha * e,
        isolation: p.mu * i,
    }
}

/// Entry `(from, to)` of the (infinite) rate matrix.
pub fn generator_entry(from: EiState, to: EiState, p: &ModelParams) -> f64 {
    let r = event_rates(from, p);
    if to == from {
        -r.total()
    } else if to.e == from.e + 1 && to.i == from.i {
        r.exposure
    } else if from.e > 0 && to.e + 1 == from.e && to.i == from.i + 1 {
        r.incubation
    } else if from.i > 0 && to.e == from.e && to.i + 1 == from.i {
        r.isolation
    } else {
        0.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn baseline() -> ModelParams {
        ModelParams::new(0.05, 0.2, 0.1, 0.015).unwrap()
    }

    fn close(a: f64, b: f64) -> bool {
        (a - b).abs() <= 1e-12 * (1.0 + b.abs())
    }

    #[test]
    fn rates_at_origin_only_allow_exposure() {
        let r = event_rates(EiState::ORIGIN, &baseline());
        assert!(close(r.exposure, 0.015));
        assert_eq!(r.incubation, 0.0);
        assert_eq!(r.isolation, 0.0);
    }

    #[test]
    fn rates_by_hand() {
        let r = event_rates(EiState::new(2, 3), &baseline());
        assert!(close(r.exposure, 0.165));
        assert!(close(r.incubation, 0.2));
        assert!(close(r.isolation, 0.6));
        assert!(close(r.total(), 0.965));

        let r = event_rates(EiState::new(1, 0), &baseline());
        assert!(close(r.exposure, 0.015));
        assert!(close(r.incubation, 0.1));
        assert_eq!(r.isolation, 0.0);
    }

    #[test]
    fn generator_patterns() {
        let p = baseline();
        let s = EiState::new(1, 1);
        assert!(close(generator_entry(s, EiState::new(0, 2), &p), 0.1));
        assert!(close(generator_entry(s, s, &p), -0.365));
        assert_eq!(generator_entry(s, EiState::new(3, 0), &p), 0.0);
        // No incubation or isolation from empty compartments.
        assert_eq!(generator_entry(EiState::new(0, 0), EiState::new(0, 0), &p), -0.015);
    }

    #[test]
    fn rejects_negative_or_nan() {
        assert!(ModelParams::new(-0.1, 0.2, 0.1, 0.01).is_err());
        assert!(ModelParams::new(0.1, f64::NAN, 0.1, 0.01).is_err());
        assert!(TruncationConfig::new(0, 2).is_err());
    }

    #[test]
    fn json_keys() {
        let p: ModelParams =
            serde_json::from_str(r#"{"lambda":0.05,"mu":0.2,"alpha":0.1,"nu":0.015}"#).unwrap();
        assert_eq!(p, baseline());
    }

    fn neighbours(s: EiState) -> Vec<EiState> {
        let mut out = vec![EiState::new(s.e + 1, s.i)];
        if s.e > 0 {
            out.push(EiState::new(s.e - 1, s.i + 1));
        }
        if s.i > 0 {
            out.push(EiState::new(s.e, s.i - 1));
        }
        out
    }

    proptest! {
        #[test]
        fn rows_sum_to_zero(e in 0u32..50, i in 0u32..50,
                            l in 0.0f64..2.0, m in 0.0f64..2.0, a in 0.0f64..2.0, n in 0.0f64..2.0) {
            let p = ModelParams::new(l, m, a, n).unwrap();
            let s = EiState::new(e, i);
            let off: f64 = neighbours(s).into_iter().map(|t| generator_entry(s, t, &p)).sum();
            let diag = generator_entry(s, s, &p);
            prop_assert!((diag + off).abs() <= 1e-12 * (1.0 + off.abs()));
        }

        #[test]
        fn rates_nonnegative_and_affine(e in 0u32..100, i in 0u32..100,
                                        l in 0.0f64..2.0, m in 0.0f64..2.0, a in 0.0f64..2.0, n in 0.0f64..2.0) {
            let p = ModelParams::new(l, m, a, n).unwrap();
            let r = event_rates(EiState::new(e, i), &p);
            let r0 = event_rates(EiState::new(0, 0), &p);
            let re = event_rates(EiState::new(1, 0), &p);
            let ri = event_rates(EiState::new(0, 1), &p);
            prop_assert!(r.exposure >= 0.0 && r.incubation >= 0.0 && r.isolation >= 0.0);
            let affine = |f: fn(&EventRates) -> f64| {
                f(&r0) + e as f64 * (f(&re) - f(&r0)) + i as f64 * (f(&ri) - f(&r0))
            };
            prop_assert!((affine(|r| r.exposure) - r.exposure).abs() < 1e-9);
            prop_assert!((affine(|r| r.incubation) - r.incubation).abs() < 1e-9);
            prop_assert!((affine(|r| r.isolation) - r.isolation).abs() < 1e-9);
        }

        #[test]
        fn params_json_round_trip_bit_exact(l in 0.0f64..10.0, m in 0.0f64..10.0, a in 0.0f64..10.0, n in 0.0f64..10.0) {
            let p = ModelParams::new(l, m, a, n).unwrap();
            let back: ModelParams = serde_json::from_str(&serde_json::to_string(&p).unwrap()).unwrap();
            prop_assert_eq!(p.lambda.to_bits(), back.lambda.to_bits());
            prop_assert_eq!(p.mu.to_bits(), back.mu.to_bits());
            prop_assert_eq!(p.alpha.to_bits(), back.alpha.to_bits());
            prop_assert_eq!(p.nu.to_bits(), back.nu.to_bits());
        }
    }
}
