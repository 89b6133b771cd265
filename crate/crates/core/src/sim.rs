//! Exact event-driven simulation of the count process and its window
//! observations.
//!
//! Paths are generated with the direct method: exponential holding times at
//! the total exit rate, then a jump chosen in proportion to the individual
//! rates. Long paths are consumed through an event callback so nothing has
//! to be stored unless a [`Trajectory`] is requested.

use rand::Rng;
use rand_distr::Exp1;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{EiState, ModelParams};
use crate::rng::{replica_rng, SimRng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EventKind {
    /// `(e, i) -> (e + 1, i)`
    Exposure,
    /// `(e, i) -> (e - 1, i + 1)`
    Incubation,
    /// `(e, i) -> (e, i - 1)`; the observed event.
    Isolation,
    /// `(e, i) -> (e, i + 1)`; direct infection in the one-compartment model.
    Arrival,
}

impl EventKind {
    pub fn apply(self, s: EiState) -> EiState {
        match self {
            EventKind::Exposure => EiState::new(s.e + 1, s.i),
            EventKind::Incubation => EiState::new(s.e - 1, s.i + 1),
            EventKind::Isolation => EiState::new(s.e, s.i - 1),
            EventKind::Arrival => EiState::new(s.e, s.i + 1),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            EventKind::Exposure => "exposure",
            EventKind::Incubation => "incubation",
            EventKind::Isolation => "isolation",
            EventKind::Arrival => "arrival",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "exposure" => EventKind::Exposure,
            "incubation" => EventKind::Incubation,
            "isolation" => EventKind::Isolation,
            "arrival" => EventKind::Arrival,
            _ => return None,
        })
    }
}

/// A continuous-time jump process on `(e, i)` with at most three moves.
pub trait Dynamics: Sync {
    fn kinds(&self) -> [EventKind; 3];
    fn rates(&self, s: EiState) -> [f64; 3];
}

impl Dynamics for ModelParams {
    fn kinds(&self) -> [EventKind; 3] {
        [EventKind::Exposure, EventKind::Incubation, EventKind::Isolation]
    }

    fn rates(&self, s: EiState) -> [f64; 3] {
        let r = crate::params::event_rates(s, self);
        [r.exposure, r.incubation, r.isolation]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub time: f64,
    pub kind: EventKind,
    /// State right after the jump.
    pub state: EiState,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub initial: EiState,
    pub events: Vec<Event>,
    pub horizon: f64,
    pub cumulative_isolations: u64,
}

impl Trajectory {
    pub fn final_state(&self) -> EiState {
        self.events.last().map_or(self.initial, |ev| ev.state)
    }

    /// Checks ordering, post-state consistency and the isolation tally.
    pub fn check(&self) -> Result<()> {
        let mut prev_t = 0.0;
        let mut s = self.initial;
        let mut isolations = 0u64;
        for (k, ev) in self.events.iter().enumerate() {
            if !(ev.time > prev_t || (k == 0 && ev.time >= 0.0)) || ev.time > self.horizon {
                return Err(Error::Shape(format!("event {k} at t = {} is out of order", ev.time)));
            }
            let legal = match ev.kind {
                EventKind::Incubation => s.e > 0,
                EventKind::Isolation => s.i > 0,
                _ => true,
            };
            if !legal || ev.kind.apply(s) != ev.state {
                return Err(Error::Shape(format!("event {k} is inconsistent with state {s:?}")));
            }
            if ev.kind == EventKind::Isolation {
                isolations += 1;
            }
            s = ev.state;
            prev_t = ev.time;
        }
        if isolations != self.cumulative_isolations {
            return Err(Error::Shape("isolation tally does not match events".into()));
        }
        Ok(())
    }
}

/// Window counts `Y_n` of isolations over `((n-1) dt, n dt]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservationSeries {
    pub dt: f64,
    pub values: Vec<u32>,
}

impl ObservationSeries {
    pub fn new(dt: f64, values: Vec<u32>) -> Result<Self> {
        check_dt(dt)?;
        Ok(Self { dt, values })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn max(&self) -> u32 {
        self.values.iter().copied().max().unwrap_or(0)
    }

    pub fn total(&self) -> u64 {
        self.values.iter().map(|&y| u64::from(y)).sum()
    }

    /// Isolations per unit time.
    pub fn rate(&self) -> f64 {
        if self.values.is_empty() {
            return 0.0;
        }
        self.total() as f64 / (self.values.len() as f64 * self.dt)
    }
}

/// The skeleton chain `(E_{n dt}, I_{n dt})` for `n = 0..=T` with the window
/// counts between consecutive samples.
#[derive(Debug, Clone, PartialEq)]
pub struct SkeletonPath {
    pub states: Vec<EiState>,
    pub observations: ObservationSeries,
}

fn check_dt(dt: f64) -> Result<()> {
    if !dt.is_finite() || dt <= 0.0 {
        return Err(Error::InvalidConfig(format!("window length must be positive, got {dt}")));
    }
    Ok(())
}

fn check_horizon(horizon: f64) -> Result<()> {
    if !horizon.is_finite() || horizon <= 0.0 {
        return Err(Error::InvalidConfig(format!("horizon must be positive and finite, got {horizon}")));
    }
    Ok(())
}

/// Number of complete windows of length `dt` in `[0, horizon]`.
pub fn window_count(horizon: f64, dt: f64) -> usize {
    ((horizon / dt) * (1.0 + 1e-12)).floor() as usize
}

/// Runs one path up to `horizon`, reporting each jump, and returns the final
/// state.
pub fn run_path<D: Dynamics + ?Sized>(
    dynamics: &D,
    initial: EiState,
    horizon: f64,
    rng: &mut SimRng,
    mut on_event: impl FnMut(&Event),
) -> EiState {
    let kinds = dynamics.kinds();
    let mut t = 0.0;
    let mut s = initial;
    loop {
        let r = dynamics.rates(s);
        let total = r[0] + r[1] + r[2];
        if total <= 0.0 {
            break;
        }
        let mut wait = 0.0;
        while wait == 0.0 {
            let x: f64 = rng.sample(Exp1);
            wait = x / total;
        }
        t += wait;
        if t > horizon {
            break;
        }
        let u = rng.random::<f64>() * total;
        let k = if u < r[0] {
            0
        } else if u < r[0] + r[1] {
            1
        } else {
            2
        };
        s = kinds[k].apply(s);
        on_event(&Event { time: t, kind: kinds[k], state: s });
    }
    s
}

pub fn simulate(p: &ModelParams, initial: EiState, horizon: f64, seed: u64) -> Result<Trajectory> {
    simulate_dynamics(p, initial, horizon, seed)
}

pub fn simulate_dynamics<D: Dynamics + ?Sized>(
    dynamics: &D,
    initial: EiState,
    horizon: f64,
    seed: u64,
) -> Result<Trajectory> {
    check_horizon(horizon)?;
    let mut rng = replica_rng(seed, 0);
    let mut events = Vec::new();
    let mut isolations = 0u64;
    run_path(dynamics, initial, horizon, &mut rng, |ev| {
        if ev.kind == EventKind::Isolation {
            isolations += 1;
        }
        events.push(*ev);
    });
    Ok(Trajectory { initial, events, horizon, cumulative_isolations: isolations })
}

/// Turns a stream of events into skeleton samples and window counts.
struct WindowRecorder {
    dt: f64,
    windows: usize,
    next: usize,
    y: u32,
    current: EiState,
    states: Vec<EiState>,
    values: Vec<u32>,
}

impl WindowRecorder {
    fn new(initial: EiState, horizon: f64, dt: f64) -> Self {
        let windows = window_count(horizon, dt);
        let mut states = Vec::with_capacity(windows + 1);
        states.push(initial);
        Self {
            dt,
            windows,
            next: 1,
            y: 0,
            current: initial,
            states,
            values: Vec::with_capacity(windows),
        }
    }

    fn close(&mut self) {
        self.states.push(self.current);
        self.values.push(self.y);
        self.y = 0;
        self.next += 1;
    }

    fn observe(&mut self, ev: &Event) {
        while self.next <= self.windows && ev.time > self.next as f64 * self.dt {
            self.close();
        }
        if self.next > self.windows {
            return;
        }
        if ev.kind == EventKind::Isolation {
            self.y += 1;
        }
        self.current = ev.state;
    }

    fn finish(mut self) -> SkeletonPath {
        while self.next <= self.windows {
            self.close();
        }
        SkeletonPath {
            states: self.states,
            observations: ObservationSeries { dt: self.dt, values: self.values },
        }
    }
}

/// Samples a stored trajectory every `dt`; the trailing partial window is
/// dropped.
pub fn skeleton_sample(t: &Trajectory, dt: f64) -> Result<SkeletonPath> {
    check_dt(dt)?;
    let mut rec = WindowRecorder::new(t.initial, t.horizon, dt);
    for ev in &t.events {
        rec.observe(ev);
    }
    Ok(rec.finish())
}

/// Simulates and samples in one pass without storing events.
pub fn simulate_skeleton_path<D: Dynamics + ?Sized>(
    dynamics: &D,
    initial: EiState,
    horizon: f64,
    dt: f64,
    seed: u64,
) -> Result<SkeletonPath> {
    check_horizon(horizon)?;
    check_dt(dt)?;
    let mut rng = replica_rng(seed, 0);
    let mut rec = WindowRecorder::new(initial, horizon, dt);
    run_path(dynamics, initial, horizon, &mut rng, |ev| rec.observe(ev));
    Ok(rec.finish())
}

/// A Monte Carlo mean with its 95% normal confidence half-width.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub mean: f64,
    pub half_width: f64,
}

impl Estimate {
    pub fn from_samples(xs: impl IntoIterator<Item = f64>) -> Self {
        let mut n = 0usize;
        let mut mean = 0.0;
        let mut m2 = 0.0;
        for x in xs {
            n += 1;
            let d = x - mean;
            mean += d / n as f64;
            m2 += d * (x - mean);
        }
        let half_width = if n > 1 {
            1.96 * (m2 / (n - 1) as f64).sqrt() / (n as f64).sqrt()
        } else {
            f64::INFINITY
        };
        Self { mean, half_width }
    }

    pub fn lower(&self) -> f64 {
        self.mean - self.half_width
    }

    pub fn upper(&self) -> f64 {
        self.mean + self.half_width
    }

    pub fn covers(&self, x: f64, widths: f64) -> bool {
        (self.mean - x).abs() <= widths * self.half_width
    }
}

/// Empirical end-of-horizon moments over independent replicas.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McMoments {
    pub e: Estimate,
    pub i: Estimate,
    pub ei: Estimate,
    /// `N_H / H`, one value per replica.
    pub n_rate: Estimate,
    pub n_rate_samples: Vec<f64>,
    pub n_mc: usize,
    pub horizon: f64,
}

pub fn mc_moments(
    p: &ModelParams,
    initial: EiState,
    horizon: f64,
    n_mc: usize,
    seed: u64,
) -> Result<McMoments> {
    check_horizon(horizon)?;
    if n_mc < 2 {
        return Err(Error::InvalidConfig(format!("need at least 2 replicas, got {n_mc}")));
    }
    let ends: Vec<(EiState, u64)> = (0..n_mc as u64)
        .into_par_iter()
        .map(|k| {
            let mut rng = replica_rng(seed, k);
            let mut isolations = 0u64;
            let end = run_path(p, initial, horizon, &mut rng, |ev| {
                if ev.kind == EventKind::Isolation {
                    isolations += 1;
                }
            });
            (end, isolations)
        })
        .collect();
    let n_rate_samples: Vec<f64> = ends.iter().map(|&(_, n)| n as f64 / horizon).collect();
    Ok(McMoments {
        e: Estimate::from_samples(ends.iter().map(|(s, _)| f64::from(s.e))),
        i: Estimate::from_samples(ends.iter().map(|(s, _)| f64::from(s.i))),
        ei: Estimate::from_samples(ends.iter().map(|(s, _)| f64::from(s.e) * f64::from(s.i))),
        n_rate: Estimate::from_samples(n_rate_samples.iter().copied()),
        n_rate_samples,
        n_mc,
        horizon,
    })
}
