//! Adaptive Dormand–Prince 5(4) integration onto a fixed output grid.
//!
//! Output points are produced by the method's continuous extension, so the
//! step size is chosen purely by the error controller and never truncated to
//! hit a grid stamp.

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pbm::MomentState;

/// Largest negative excursion that is silently clamped to zero after a step.
pub const CLAMP_LIMIT: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IntegratorConfig {
    pub rel_tol: f64,
    pub abs_tol: f64,
    /// Upper bound on the step [min].
    pub max_step: f64,
    /// First trial step [min]; zero selects one automatically.
    pub initial_step: f64,
    pub max_steps: usize,
}

impl Default for IntegratorConfig {
    fn default() -> Self {
        Self {
            rel_tol: 1e-8,
            abs_tol: 1e-10,
            max_step: 1.0,
            initial_step: 0.0,
            max_steps: 1_000_000,
        }
    }
}

impl IntegratorConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.rel_tol > 0.0 && self.abs_tol > 0.0) {
            return Err(Error::Config("integrator tolerances must be positive".into()));
        }
        if self.max_steps == 0 || !(self.max_step > 0.0) || self.initial_step < 0.0 {
            return Err(Error::Config(
                "integrator step limits must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// States sampled on a time grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub t_grid: Vec<f64>,
    pub states: Vec<MomentState>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.t_grid.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t_grid.is_empty()
    }

    pub fn last(&self) -> Option<&MomentState> {
        self.states.last()
    }

    /// Column `j` of the state matrix.
    pub fn component(&self, j: usize) -> Vec<f64> {
        self.states.iter().map(|s| s.to_array()[j]).collect()
    }

    pub fn to_rows(&self) -> Vec<[f64; 5]> {
        self.states.iter().map(|s| s.to_array()).collect()
    }
}

/// Uniform grid `0, dt, 2 dt, ..., t_end`.
pub fn uniform_grid(t_end: f64, dt: f64) -> Vec<f64> {
    let n = (t_end / dt).round() as usize;
    (0..=n).map(|k| k as f64 * dt).collect()
}

/// Statistics collected during one integration.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct IntegrationStats {
    pub accepted: usize,
    pub rejected: usize,
    pub rhs_evals: usize,
    /// Steps where a small negative component was clamped to zero.
    pub clamps: usize,
}

// Dormand–Prince coefficients.
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
const A71: f64 = 35.0 / 384.0;
const A73: f64 = 500.0 / 1113.0;
const A74: f64 = 125.0 / 192.0;
const A75: f64 = -2187.0 / 6784.0;
const A76: f64 = 11.0 / 84.0;
const E1: f64 = 71.0 / 57600.0;
const E3: f64 = -71.0 / 16695.0;
const E4: f64 = 71.0 / 1920.0;
const E5: f64 = -17253.0 / 339200.0;
const E6: f64 = 22.0 / 525.0;
const E7: f64 = -1.0 / 40.0;
// Dense output (Hairer's contd5).
const D1: f64 = -12715105075.0 / 11282082432.0;
const D3: f64 = 87487479700.0 / 32700410799.0;
const D4: f64 = -10690763975.0 / 1880347072.0;
const D5: f64 = 701980252875.0 / 199316789632.0;
const D6: f64 = -1453857185.0 / 822651844.0;
const D7: f64 = 69997945.0 / 29380423.0;

const SAFETY: f64 = 0.9;
const FAC_MIN: f64 = 0.2;
const FAC_MAX: f64 = 10.0;
// PI controller exponents (Gustafsson / Hairer DOPRI5 with beta = 0.04).
const PI_BETA: f64 = 0.04;
const PI_ALPHA: f64 = 0.2 - PI_BETA * 0.75;

type Vec5 = [f64; 5];

fn axpy(y: &Vec5, terms: &[(f64, &Vec5)], h: f64) -> Vec5 {
    let mut out = *y;
    for (c, k) in terms {
        for i in 0..5 {
            out[i] += h * c * k[i];
        }
    }
    out
}

/// Integrates `rhs(t, x)` from `x0` at `t_grid[0]` and samples every grid
/// stamp.
pub fn integrate<F>(
    rhs: F,
    x0: MomentState,
    t_grid: &[f64],
    cfg: &IntegratorConfig,
) -> Result<Trajectory>
where
    F: FnMut(f64, &Vec5) -> Result<Vec5>,
{
    integrate_with_stats(rhs, x0, t_grid, cfg).map(|(traj, _)| traj)
}

pub fn integrate_with_stats<F>(
    mut rhs: F,
    x0: MomentState,
    t_grid: &[f64],
    cfg: &IntegratorConfig,
) -> Result<(Trajectory, IntegrationStats)>
where
    F: FnMut(f64, &Vec5) -> Result<Vec5>,
{
    cfg.validate()?;
    if t_grid.is_empty() {
        return Err(Error::Contract("empty output grid".into()));
    }
    if t_grid.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::Contract("output grid must be strictly increasing".into()));
    }
    if !x0.is_non_negative() {
        return Err(Error::Contract(format!("negative initial state {x0:?}")));
    }

    let mut stats = IntegrationStats::default();
    let mut states = Vec::with_capacity(t_grid.len());
    states.push(x0);

    let t_end = *t_grid.last().unwrap();
    let mut t = t_grid[0];
    let mut y = x0.to_array();
    let mut k1 = rhs(t, &y)?;
    stats.rhs_evals += 1;

    let mut h = if cfg.initial_step > 0.0 {
        cfg.initial_step
    } else {
        initial_step(&mut rhs, t, &y, &k1, cfg, &mut stats)?
    }
    .min(cfg.max_step);
    let mut err_old: f64 = 1e-4;
    let mut next_out = 1;
    let mut last_rejected = false;

    while next_out < t_grid.len() {
        if stats.accepted + stats.rejected >= cfg.max_steps {
            return Err(Error::Divergence {
                t,
                reason: format!("max_steps = {} exceeded", cfg.max_steps),
            });
        }
        h = h.min(t_end - t).min(cfg.max_step);
        if h < 1e-14 * t.abs().max(1.0) {
            return Err(Error::Divergence {
                t,
                reason: format!("step size underflow (h = {h:e})"),
            });
        }

        let y2 = axpy(&y, &[(A21, &k1)], h);
        let k2 = rhs(t + C2 * h, &y2)?;
        let y3 = axpy(&y, &[(A31, &k1), (A32, &k2)], h);
        let k3 = rhs(t + C3 * h, &y3)?;
        let y4 = axpy(&y, &[(A41, &k1), (A42, &k2), (A43, &k3)], h);
        let k4 = rhs(t + C4 * h, &y4)?;
        let y5 = axpy(&y, &[(A51, &k1), (A52, &k2), (A53, &k3), (A54, &k4)], h);
        let k5 = rhs(t + C5 * h, &y5)?;
        let y6 = axpy(
            &y,
            &[(A61, &k1), (A62, &k2), (A63, &k3), (A64, &k4), (A65, &k5)],
            h,
        );
        let k6 = rhs(t + h, &y6)?;
        let y_new = axpy(
            &y,
            &[(A71, &k1), (A73, &k3), (A74, &k4), (A75, &k5), (A76, &k6)],
            h,
        );
        let k7 = rhs(t + h, &y_new)?;
        stats.rhs_evals += 6;

        let mut err_sq = 0.0;
        for i in 0..5 {
            let e = h
                * (E1 * k1[i] + E3 * k3[i] + E4 * k4[i] + E5 * k5[i] + E6 * k6[i] + E7 * k7[i]);
            let sc = cfg.abs_tol + cfg.rel_tol * y[i].abs().max(y_new[i].abs());
            err_sq += (e / sc).powi(2);
        }
        let err = (err_sq / 5.0).sqrt();
        if !err.is_finite() {
            return Err(Error::Divergence {
                t,
                reason: "non-finite error estimate".into(),
            });
        }

        if err <= 1.0 {
            // Dense output coefficients for t in [t, t + h].
            let mut rcont = [[0.0; 5]; 5];
            for i in 0..5 {
                let ydiff = y_new[i] - y[i];
                let bspl = h * k1[i] - ydiff;
                rcont[0][i] = y[i];
                rcont[1][i] = ydiff;
                rcont[2][i] = bspl;
                rcont[3][i] = ydiff - h * k7[i] - bspl;
                rcont[4][i] = h
                    * (D1 * k1[i] + D3 * k3[i] + D4 * k4[i] + D5 * k5[i] + D6 * k6[i]
                        + D7 * k7[i]);
            }
            let t_new = t + h;
            while next_out < t_grid.len() && t_grid[next_out] <= t_new + 1e-12 * t_new.abs() {
                let theta = ((t_grid[next_out] - t) / h).clamp(0.0, 1.0);
                let theta1 = 1.0 - theta;
                let mut out = [0.0; 5];
                for i in 0..5 {
                    out[i] = rcont[0][i]
                        + theta
                            * (rcont[1][i]
                                + theta1
                                    * (rcont[2][i]
                                        + theta * (rcont[3][i] + theta1 * rcont[4][i])));
                }
                states.push(MomentState::from_array(clamp_state(out, t_grid[next_out])?));
                next_out += 1;
            }

            t = t_new;
            let (clamped, did_clamp) = clamp_negative(y_new, t)?;
            if did_clamp {
                stats.clamps += 1;
                k1 = rhs(t, &clamped)?;
                stats.rhs_evals += 1;
            } else {
                k1 = k7;
            }
            y = clamped;
            stats.accepted += 1;

            let err_c = err.max(1e-10);
            let mut fac = SAFETY * err_old.powf(PI_BETA) / err_c.powf(PI_ALPHA);
            fac = fac.clamp(FAC_MIN, FAC_MAX);
            if last_rejected {
                fac = fac.min(1.0);
            }
            h *= fac;
            err_old = err_c;
            last_rejected = false;
        } else {
            stats.rejected += 1;
            let fac = (SAFETY / err.powf(PI_ALPHA)).clamp(FAC_MIN, 1.0);
            h *= fac;
            last_rejected = true;
        }
    }

    if stats.clamps > 0 {
        warn!("{} post-step non-negativity clamps", stats.clamps);
    }
    Ok((
        Trajectory {
            t_grid: t_grid.to_vec(),
            states,
        },
        stats,
    ))
}

fn clamp_negative(mut y: Vec5, t: f64) -> Result<(Vec5, bool)> {
    let mut clamped = false;
    for v in y.iter_mut() {
        if *v < 0.0 {
            if *v < -CLAMP_LIMIT {
                return Err(Error::Divergence {
                    t,
                    reason: format!("state component {v:e} below clamp limit"),
                });
            }
            *v = 0.0;
            clamped = true;
        }
    }
    Ok((y, clamped))
}

fn clamp_state(y: Vec5, t: f64) -> Result<Vec5> {
    clamp_negative(y, t).map(|(y, _)| y)
}

fn initial_step<F>(
    rhs: &mut F,
    t: f64,
    y: &Vec5,
    f0: &Vec5,
    cfg: &IntegratorConfig,
    stats: &mut IntegrationStats,
) -> Result<f64>
where
    F: FnMut(f64, &Vec5) -> Result<Vec5>,
{
    let sc = |i: usize| cfg.abs_tol + cfg.rel_tol * y[i].abs();
    let d0 = (0..5).map(|i| (y[i] / sc(i)).powi(2)).sum::<f64>().sqrt() / 5f64.sqrt();
    let d1 = (0..5).map(|i| (f0[i] / sc(i)).powi(2)).sum::<f64>().sqrt() / 5f64.sqrt();
    let h0 = if d0 < 1e-5 || d1 < 1e-5 {
        1e-6
    } else {
        0.01 * d0 / d1
    }
    .min(cfg.max_step);
    let y1 = axpy(y, &[(1.0, f0)], h0);
    let f1 = rhs(t + h0, &y1)?;
    stats.rhs_evals += 1;
    let d2 = (0..5)
        .map(|i| ((f1[i] - f0[i]) / sc(i)).powi(2))
        .sum::<f64>()
        .sqrt()
        / 5f64.sqrt()
        / h0;
    let h1 = if d1.max(d2) <= 1e-15 {
        (h0 * 1e-3).max(1e-6)
    } else {
        (0.01 / d1.max(d2)).powf(1.0 / 5.0)
    };
    Ok((100.0 * h0).min(h1).min(cfg.max_step))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_decay(_t: f64, y: &Vec5) -> Result<Vec5> {
        Ok([-y[0], 0.0, 0.0, 0.0, 0.0])
    }

    #[test]
    fn zero_rhs_keeps_initial_state() {
        let x0 = MomentState::from_array([1.0, 2.0, 3.0, 4.0, 0.4]);
        let grid = uniform_grid(500.0, 1.0);
        let traj = integrate(|_, _| Ok([0.0; 5]), x0, &grid, &IntegratorConfig::default()).unwrap();
        assert_eq!(traj.len(), 501);
        assert!(traj.states.iter().all(|s| *s == x0));
    }

    #[test]
    fn exponential_decay_matches_closed_form() {
        let cfg = IntegratorConfig::default();
        let x0 = MomentState::from_array([1.0, 0.0, 0.0, 0.0, 0.0]);
        let traj = integrate(scalar_decay, x0, &[0.0, 0.5, 1.0], &cfg).unwrap();
        let y1 = traj.states[2].mu0;
        let exact = (-1.0f64).exp();
        assert!(((y1 - exact) / exact).abs() < cfg.rel_tol * 10.0, "{y1} vs {exact}");
    }

    #[test]
    fn dense_output_matches_between_steps() {
        let cfg = IntegratorConfig {
            max_step: 50.0,
            ..Default::default()
        };
        let x0 = MomentState::from_array([1.0, 0.0, 0.0, 0.0, 0.0]);
        let grid: Vec<f64> = (0..=40).map(|k| k as f64 * 0.1).collect();
        let traj = integrate(scalar_decay, x0, &grid, &cfg).unwrap();
        for (t, s) in traj.t_grid.iter().zip(&traj.states) {
            let exact = (-t).exp();
            assert!((s.mu0 - exact).abs() < 1e-7, "t={t}: {} vs {exact}", s.mu0);
        }
    }

    #[test]
    fn max_steps_is_reported_as_divergence() {
        let cfg = IntegratorConfig {
            max_steps: 3,
            ..Default::default()
        };
        let x0 = MomentState::from_array([1.0, 0.0, 0.0, 0.0, 0.0]);
        let err = integrate(scalar_decay, x0, &uniform_grid(100.0, 1.0), &cfg).unwrap_err();
        assert!(matches!(err, Error::Divergence { .. }), "{err}");
    }

    #[test]
    fn large_negative_excursion_fails() {
        let x0 = MomentState::from_array([1.0, 0.0, 0.0, 0.0, 0.0]);
        let err = integrate(
            |_, _| Ok([-1.0, 0.0, 0.0, 0.0, 0.0]),
            x0,
            &uniform_grid(5.0, 1.0),
            &IntegratorConfig::default(),
        )
        .unwrap_err();
        assert!(matches!(err, Error::Divergence { .. }));
    }

    #[test]
    fn rejects_non_monotone_grid() {
        let x0 = MomentState::default();
        let err = integrate(
            |_, _| Ok([0.0; 5]),
            x0,
            &[0.0, 2.0, 1.0],
            &IntegratorConfig::default(),
        )
        .unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
    }
}
