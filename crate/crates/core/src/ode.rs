//! Adaptive Dormand-Prince 5(4) integration for the master-equation and
//! moment systems.

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy)]
pub struct Tolerance {
    pub atol: f64,
    pub rtol: f64,
}

impl Default for Tolerance {
    fn default() -> Self {
        Self { atol: 1e-10, rtol: 1e-8 }
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct Stats {
    pub accepted: usize,
    pub rejected: usize,
}

const C2: f64 = 1.0 / 5.0;
const C3: f64 = 3.0 / 10.0;
const C4: f64 = 4.0 / 5.0;
const C5: f64 = 8.0 / 9.0;
const A21: f64 = 1.0 / 5.0;
const A31: f64 = 3.0 / 40.0;
const A32: f64 = 9.0 / 40.0;
const A41: f64 = 44.0 / 45.0;
const A42: f64 = -56.0 / 15.0;
const A43: f64 = 32.0 / 9.0;
const A51: f64 = 19372.0 / 6561.0;
const A52: f64 = -25360.0 / 2187.0;
const A53: f64 = 64448.0 / 6561.0;
const A54: f64 = -212.0 / 729.0;
const A61: f64 = 9017.0 / 3168.0;
const A62: f64 = -355.0 / 33.0;
const A63: f64 = 46732.0 / 5247.0;
const A64: f64 = 49.0 / 176.0;
const A65: f64 = -5103.0 / 18656.0;
const B1: f64 = 35.0 / 384.0;
const B3: f64 = 500.0 / 1113.0;
const B4: f64 = 125.0 / 192.0;
const B5: f64 = -2187.0 / 6784.0;
const B6: f64 = 11.0 / 84.0;
const E1: f64 = 71.0 / 57600.0;
const E3: f64 = -71.0 / 16695.0;
const E4: f64 = 71.0 / 1920.0;
const E5: f64 = -17253.0 / 339200.0;
const E6: f64 = 22.0 / 525.0;
const E7: f64 = -1.0 / 40.0;

const MAX_STEPS: usize = 5_000_000;

/// Integrates `y' = f(t, y)` from `t0`, calling `on_output` at each of the
/// increasing `times` (which must all be `>= t0`). `y` holds the state at
/// the last output time on return.
pub fn integrate<F, O>(
    mut f: F,
    t0: f64,
    y: &mut [f64],
    times: &[f64],
    tol: Tolerance,
    mut on_output: O,
) -> Result<Stats>
where
    F: FnMut(f64, &[f64], &mut [f64]),
    O: FnMut(f64, &[f64]),
{
    let n = y.len();
    let mut stats = Stats::default();
    let mut k = vec![vec![0.0; n]; 7];
    let mut tmp = vec![0.0; n];
    let mut y_new = vec![0.0; n];
    let mut t = t0;

    f(t, y, &mut k[0]);
    let mut h = initial_step(y, &k[0], tol);

    for &t_out in times {
        if t_out < t {
            return Err(Error::InvalidConfig("output times must be increasing".into()));
        }
        while t < t_out {
            if stats.accepted + stats.rejected > MAX_STEPS {
                return Err(Error::InvalidConfig("integrator exceeded its step budget".into()));
            }
            let last = t + h >= t_out;
            let step = if last { t_out - t } else { h };

            let (k0, rest) = k.split_first_mut().unwrap();
            let [k1, k2, k3, k4, k5, k6] = rest else { unreachable!() };
            for m in 0..n {
                tmp[m] = y[m] + step * A21 * k0[m];
            }
            f(t + C2 * step, &tmp, k1);
            for m in 0..n {
                tmp[m] = y[m] + step * (A31 * k0[m] + A32 * k1[m]);
            }
            f(t + C3 * step, &tmp, k2);
            for m in 0..n {
                tmp[m] = y[m] + step * (A41 * k0[m] + A42 * k1[m] + A43 * k2[m]);
            }
            f(t + C4 * step, &tmp, k3);
            for m in 0..n {
                tmp[m] = y[m] + step * (A51 * k0[m] + A52 * k1[m] + A53 * k2[m] + A54 * k3[m]);
            }
            f(t + C5 * step, &tmp, k4);
            for m in 0..n {
                tmp[m] = y[m]
                    + step * (A61 * k0[m] + A62 * k1[m] + A63 * k2[m] + A64 * k3[m] + A65 * k4[m]);
            }
            f(t + step, &tmp, k5);
            for m in 0..n {
                y_new[m] = y[m]
                    + step * (B1 * k0[m] + B3 * k2[m] + B4 * k3[m] + B5 * k4[m] + B6 * k5[m]);
            }
            f(t + step, &y_new, k6);

            let mut err = 0.0;
            for m in 0..n {
                let e = step
                    * (E1 * k0[m] + E3 * k2[m] + E4 * k3[m] + E5 * k4[m] + E6 * k5[m] + E7 * k6[m]);
                let sc = tol.atol + tol.rtol * y[m].abs().max(y_new[m].abs());
                err += (e / sc).powi(2);
            }
            let err = (err / n.max(1) as f64).sqrt();

            if err <= 1.0 {
                stats.accepted += 1;
                t = if last { t_out } else { t + step };
                y.copy_from_slice(&y_new);
                std::mem::swap(k0, k6);
                let fac = if err == 0.0 { 5.0 } else { (0.9 * err.powf(-0.2)).clamp(0.2, 5.0) };
                // A clipped final step says nothing about the natural step size.
                if !last || fac < 1.0 {
                    h = step * fac;
                }
            } else {
                stats.rejected += 1;
                h = step * (0.9 * err.powf(-0.2)).max(0.1);
            }
        }
        on_output(t, y);
    }
    Ok(stats)
}

fn initial_step(y: &[f64], dy: &[f64], tol: Tolerance) -> f64 {
    let n = y.len().max(1) as f64;
    let (mut d0, mut d1) = (0.0, 0.0);
    for (a, b) in y.iter().zip(dy) {
        let sc = tol.atol + tol.rtol * a.abs();
        d0 += (a / sc).powi(2);
        d1 += (b / sc).powi(2);
    }
    let (d0, d1) = ((d0 / n).sqrt(), (d1 / n).sqrt());
    if d0 < 1e-5 || d1 < 1e-5 {
        1e-6
    } else {
        (0.01 * d0 / d1).min(1.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exponential_decay_to_tolerance() {
        let mut y = vec![1.0, 2.0];
        let times = [0.5, 1.0, 3.0];
        let mut seen = Vec::new();
        integrate(
            |_, y, dy| {
                dy[0] = -y[0];
                dy[1] = -3.0 * y[1];
            },
            0.0,
            &mut y,
            &times,
            Tolerance::default(),
            |t, y| seen.push((t, y[0], y[1])),
        )
        .unwrap();
        for (t, a, b) in seen {
            assert!((a - (-t).exp()).abs() < 1e-8, "t = {t}");
            assert!((b - 2.0 * (-3.0 * t).exp()).abs() < 1e-8, "t = {t}");
        }
    }

    #[test]
    fn harmonic_oscillator_long_run() {
        let mut y = vec![1.0, 0.0];
        integrate(
            |_, y, dy| {
                dy[0] = y[1];
                dy[1] = -y[0];
            },
            0.0,
            &mut y,
            &[20.0],
            Tolerance { atol: 1e-12, rtol: 1e-10 },
            |_, _| {},
        )
        .unwrap();
        assert!((y[0] - 20f64.cos()).abs() < 1e-7);
        assert!((y[1] + 20f64.sin()).abs() < 1e-7);
    }

    #[test]
    fn zero_length_output() {
        let mut y = vec![1.0];
        let mut hits = 0;
        integrate(|_, _, dy| dy[0] = 1.0, 0.0, &mut y, &[0.0, 0.0], Tolerance::default(), |_, _| hits += 1)
            .unwrap();
        assert_eq!(hits, 2);
        assert_eq!(y[0], 1.0);
    }
}
