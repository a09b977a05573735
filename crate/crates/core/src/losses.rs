//! Training objective: adaptive MSE/Huber data term, smoothness penalty and
//! the finite-difference physics residual against the moment model.

use serde::{Deserialize, Serialize};

use crate::autodiff::{concat, select, Axis, Tensor, Var};
use crate::error::{Error, Result};
use crate::pbm::{moment_rhs_generic, KineticValues, PhysicalConstants, SolubilityModel};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub lambda_physics: f64,
    pub huber_delta: f64,
    pub eta_init: f64,
    pub w_mse: f64,
    pub w_huber: f64,
    pub w_smooth: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda_physics: 1.0,
            huber_delta: 0.1,
            eta_init: 0.1,
            w_mse: 1.0,
            w_huber: 1.0,
            w_smooth: 1.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_physics >= 0.0 && self.lambda_physics.is_finite()) {
            return Err(Error::Config(format!(
                "lambda must be finite and non-negative, got {}",
                self.lambda_physics
            )));
        }
        if !(self.huber_delta > 0.0) {
            return Err(Error::Config(format!("huber delta must be positive, got {}", self.huber_delta)));
        }
        if !self.eta_init.is_finite() {
            return Err(Error::Config("eta_init must be finite".into()));
        }
        for w in [self.w_mse, self.w_huber, self.w_smooth] {
            if !(w >= 0.0 && w.is_finite()) {
                return Err(Error::Config(format!("loss term weight {w} must be non-negative")));
            }
        }
        Ok(())
    }
}

/// Scalar Huber function.
pub fn huber(r: f64, delta: f64) -> f64 {
    if r.abs() < delta {
        0.5 * r * r
    } else {
        delta * (r.abs() - 0.5 * delta)
    }
}

/// Elementwise Huber function on the tape.
pub fn huber_var(r: &Var, delta: f64) -> Var {
    let cond = r.with_value(|t| t.data().iter().map(|v| v.abs() < delta).collect());
    let quad = r.square().scale(0.5);
    let lin = r.abs().offset(-0.5 * delta).scale(delta);
    select(cond, &quad, &lin)
}

/// Weight of the MSE term for a given noise scale.
pub fn mse_weight(eta: f64) -> f64 {
    1.0 / (1.0 + eta.exp())
}

/// Mean over interior points of the squared norm of the second difference.
pub fn smoothness_loss(pred: &Var) -> Result<Var> {
    let n = pred.shape().0;
    if n < 3 {
        return Err(Error::Contract(format!("smoothness needs at least 3 points, got {n}")));
    }
    let d2 = &(&pred.rows(2, n) - &pred.rows(1, n - 1).scale(2.0)) + &pred.rows(0, n - 2);
    Ok(d2.square().sum().scale(1.0 / (n - 2) as f64))
}

/// Mixed MSE/Huber loss over observed rows plus smoothness over all rows.
///
/// `mask[k]` marks row `k` of `obs` as observed.
pub fn data_loss(pred: &Var, obs: &Tensor, mask: &[bool], eta: &Var, cfg: &LossConfig) -> Result<Var> {
    let (n, d) = pred.shape();
    if obs.shape() != (n, d) {
        return Err(Error::Shape {
            op: "data_loss",
            lhs: (n, d),
            rhs: obs.shape(),
        });
    }
    if mask.len() != n {
        return Err(Error::Shape {
            op: "data_loss mask",
            lhs: (n, 1),
            rhs: (mask.len(), 1),
        });
    }
    let observed = mask.iter().filter(|m| **m).count();
    if observed == 0 {
        return Err(Error::Contract("data loss needs at least one observed point".into()));
    }
    let tape = pred.tape();
    let weights: Vec<f64> = mask
        .iter()
        .flat_map(|&m| std::iter::repeat_n(if m { 1.0 } else { 0.0 }, d))
        .collect();
    let weights = tape.constant(Tensor::new(n, d, weights)?);
    let inv_count = 1.0 / (observed * d) as f64;

    let r = pred - &tape.constant(obs.clone());
    let mse = (&r.square() * &weights).sum().scale(inv_count);
    let hub = (&huber_var(&r, cfg.huber_delta) * &weights).sum().scale(inv_count);
    let omega = eta.neg().sigmoid();
    let one_minus = omega.neg().offset(1.0);
    let smooth = smoothness_loss(pred)?;
    Ok(&(&(&omega * &mse).scale(cfg.w_mse) + &(&one_minus * &hub).scale(cfg.w_huber))
        + &smooth.scale(cfg.w_smooth))
}

/// Inputs of the physics residual that do not depend on the learnables.
#[derive(Debug, Clone)]
pub struct PhysicsContext {
    /// Temperatures in Kelvin, one per row.
    pub temperature_k: Vec<f64>,
    /// Normalization scale per state component.
    pub scales: [f64; 5],
    pub solubility: SolubilityModel,
    pub consts: PhysicalConstants,
    /// Grid spacing in minutes.
    pub dt: f64,
}

impl PhysicsContext {
    fn saturation(&self) -> Result<Vec<f64>> {
        let n = self.temperature_k.len();
        self.temperature_k[1..n - 1]
            .iter()
            .map(|&t| self.solubility.evaluate(t))
            .collect()
    }

    fn check(&self, n: usize) -> Result<()> {
        if n < 3 {
            return Err(Error::Contract(format!("physics residual needs at least 3 points, got {n}")));
        }
        if self.temperature_k.len() != n {
            return Err(Error::Shape {
                op: "physics_loss temperature",
                lhs: (n, 5),
                rhs: (self.temperature_k.len(), 1),
            });
        }
        if !(self.dt > 0.0) {
            return Err(Error::Contract(format!("dt must be positive, got {}", self.dt)));
        }
        Ok(())
    }
}

fn first_non_finite(rhs: &[Var]) -> Option<(usize, usize)> {
    for (j, col) in rhs.iter().enumerate() {
        if let Some(k) = col.with_value(|t| t.data().iter().position(|v| !v.is_finite())) {
            return Some((k + 1, j));
        }
    }
    None
}

/// Mean squared residual between the central difference of the normalized
/// prediction and the normalized moment-model right-hand side, over interior
/// rows and all components. `log_params` holds six scalar log-parameters.
pub fn physics_loss(pred: &Var, ctx: &PhysicsContext, log_params: &[Var; 6]) -> Result<Var> {
    let (n, d) = pred.shape();
    if d != 5 {
        return Err(Error::Shape {
            op: "physics_loss",
            lhs: (n, d),
            rhs: (n, 5),
        });
    }
    ctx.check(n)?;
    let tape = pred.tape();
    let interior = pred.rows(1, n - 1);
    let x: [Var; 5] = std::array::from_fn(|j| interior.cols(j, j + 1).scale(ctx.scales[j]));
    let t = tape.constant(Tensor::column(ctx.temperature_k[1..n - 1].to_vec()));
    let c_sat = tape.constant(Tensor::column(ctx.saturation()?));
    let theta = KineticValues::from_array(std::array::from_fn(|i| log_params[i].exp()));
    let rhs = moment_rhs_generic(&x, &t, &c_sat, &theta, &ctx.consts);
    if let Some((k, j)) = first_non_finite(&rhs) {
        return Err(Error::Numeric(format!(
            "non-finite physics right-hand side at step {k}, component {j}"
        )));
    }
    let rhs: Vec<Var> = rhs
        .iter()
        .enumerate()
        .map(|(j, v)| v.scale(1.0 / ctx.scales[j]))
        .collect();
    let fd = (&pred.rows(2, n) - &pred.rows(0, n - 2)).scale(0.5 / ctx.dt);
    let residual = &fd - &concat(&rhs, Axis::Cols);
    Ok(residual.square().mean())
}

/// `data + lambda * physics`.
pub fn total_loss(data: &Var, physics: &Var, lambda: f64) -> Var {
    data + &physics.scale(lambda)
}

/// Sufficient statistics for the least-squares optimum of the two rate
/// constants, which enter the residual linearly.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct RateProjection {
    pub fd_dot_b: f64,
    pub b_dot_b: f64,
    pub fd_dot_g: f64,
    pub g_dot_g: f64,
}

impl RateProjection {
    /// Accumulates the statistics of one predicted trajectory (normalized
    /// rows) at the current shape parameters.
    pub fn from_prediction(pred: &[[f64; 5]], ctx: &PhysicsContext, log_params: &[f64; 6]) -> Result<Self> {
        let n = pred.len();
        ctx.check(n)?;
        let c_sat = ctx.saturation()?;
        let mut unit = *log_params;
        unit[0] = 0.0;
        unit[3] = 0.0;
        let theta = KineticValues::from_array(unit.map(f64::exp));
        let mut out = Self::default();
        for k in 1..n - 1 {
            let x: [f64; 5] = std::array::from_fn(|j| pred[k][j] * ctx.scales[j]);
            let rhs = moment_rhs_generic(&x, &ctx.temperature_k[k], &c_sat[k - 1], &theta, &ctx.consts);
            for j in 0..5 {
                let fd = (pred[k + 1][j] - pred[k - 1][j]) * 0.5 / ctx.dt;
                let basis = rhs[j] / ctx.scales[j];
                if !basis.is_finite() {
                    return Err(Error::Numeric(format!(
                        "non-finite physics right-hand side at step {k}, component {j}"
                    )));
                }
                if j == 0 {
                    out.fd_dot_b += fd * basis;
                    out.b_dot_b += basis * basis;
                } else {
                    out.fd_dot_g += fd * basis;
                    out.g_dot_g += basis * basis;
                }
            }
        }
        Ok(out)
    }

    pub fn merge(self, o: Self) -> Self {
        Self {
            fd_dot_b: self.fd_dot_b + o.fd_dot_b,
            b_dot_b: self.b_dot_b + o.b_dot_b,
            fd_dot_g: self.fd_dot_g + o.fd_dot_g,
            g_dot_g: self.g_dot_g + o.g_dot_g,
        }
    }

    /// Optimal `(ln k_b2, ln k_g)`; `None` where the optimum is not positive.
    pub fn log_rates(&self) -> (Option<f64>, Option<f64>) {
        let solve = |num: f64, den: f64| {
            let k = num / den;
            (den > 0.0 && k > 0.0 && k.is_finite()).then(|| k.ln())
        };
        (solve(self.fd_dot_b, self.b_dot_b), solve(self.fd_dot_g, self.g_dot_g))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;

    #[test]
    fn huber_values() {
        assert!((huber(0.05, 0.1) - 0.00125).abs() < 1e-15);
        assert!((huber(0.2, 0.1) - 0.015).abs() < 1e-15);
        assert!((huber(0.1, 0.1) - 0.005).abs() < 1e-15);
        assert!((huber(-0.2, 0.1) - 0.015).abs() < 1e-15);
    }

    #[test]
    fn mse_weight_at_default_eta() {
        assert!((mse_weight(0.1) - 0.47502081252106).abs() < 1e-12);
    }

    #[test]
    fn smoothness_cases() {
        let tape = Tape::new();
        let constant = tape.constant(Tensor::full(6, 2, 0.7));
        assert_eq!(smoothness_loss(&constant).unwrap().item(), 0.0);
        let linear = tape.constant(Tensor::column((0..6).map(|k| 1.0 + 2.0 * k as f64).collect()));
        assert!(smoothness_loss(&linear).unwrap().item().abs() < 1e-24);
        let quad = tape.constant(Tensor::column((0..6).map(|k| (k * k) as f64).collect()));
        assert!((smoothness_loss(&quad).unwrap().item() - 4.0).abs() < 1e-12);
        let short = tape.constant(Tensor::zeros(2, 5));
        assert!(matches!(smoothness_loss(&short), Err(Error::Contract(_))));
    }

    #[test]
    fn data_loss_with_exact_prediction_is_smoothness() {
        let tape = Tape::new();
        let obs = Tensor::from_rows(&[[0.0, 1.0], [1.0, 0.5], [4.0, 0.0], [9.0, 2.0]]);
        let pred = tape.param(obs.clone());
        let eta = tape.scalar(0.1);
        let mask = [true, false, true, true];
        let l = data_loss(&pred, &obs, &mask, &eta, &LossConfig::default()).unwrap();
        let s = smoothness_loss(&pred).unwrap();
        assert_eq!(l.item(), s.item());
    }

    #[test]
    fn data_loss_empty_mask_rejected() {
        let tape = Tape::new();
        let obs = Tensor::zeros(4, 5);
        let pred = tape.param(obs.clone());
        let eta = tape.scalar(0.1);
        let r = data_loss(&pred, &obs, &[false; 4], &eta, &LossConfig::default());
        assert!(matches!(r, Err(Error::Contract(_))));
    }

    #[test]
    fn data_loss_large_eta_is_huber() {
        let tape = Tape::new();
        let obs = Tensor::zeros(3, 1);
        let pred = tape.constant(Tensor::column(vec![0.0, 0.5, 0.0]));
        let eta = tape.scalar(60.0);
        let cfg = LossConfig {
            w_smooth: 0.0,
            ..LossConfig::default()
        };
        let l = data_loss(&pred, &obs, &[true; 3], &eta, &cfg).unwrap().item();
        assert!((l - huber(0.5, 0.1) / 3.0).abs() < 1e-12);
    }

    #[test]
    fn total_loss_arithmetic() {
        let tape = Tape::new();
        let (d, p) = (tape.scalar(2.0), tape.scalar(3.0));
        assert_eq!(total_loss(&d, &p, 10.0).item(), 32.0);
        assert_eq!(total_loss(&d, &p, 0.0).item(), 2.0);
    }

    fn physics_value(pred: &[[f64; 5]], ctx: &PhysicsContext, log_params: [f64; 6]) -> f64 {
        let tape = Tape::new();
        let p = tape.constant(Tensor::from_rows(pred));
        let lp = log_params.map(|v| tape.scalar(v));
        physics_loss(&p, ctx, &lp).unwrap().item()
    }

    #[test]
    fn projected_rates_minimize_physics_loss() {
        let n = 12;
        let ctx = PhysicsContext {
            temperature_k: (0..n).map(|k| 318.0 - 2.0 * k as f64).collect(),
            scales: [3e7, 9e5, 4e4, 4e3, 0.5],
            solubility: SolubilityModel::reference(),
            consts: PhysicalConstants::default(),
            dt: 5.0,
        };
        let pred: Vec<[f64; 5]> = (0..n)
            .map(|k| {
                let s = k as f64 / n as f64;
                [0.1 + 0.5 * s, 0.2 + 0.3 * s * s, 0.3 + 0.4 * s, 0.2 + 0.6 * s, 0.95 - 0.3 * s]
            })
            .collect();
        let mut lp = [8.0, 0.7, -0.3, 0.0, 10.0, 0.2];
        let (kb, kg) = RateProjection::from_prediction(&pred, &ctx, &lp).unwrap().log_rates();
        lp[0] = kb.unwrap();
        lp[3] = kg.unwrap();
        let best = physics_value(&pred, &ctx, lp);
        for (i, d) in [(0, 0.01), (0, -0.01), (3, 0.01), (3, -0.01)] {
            let mut q = lp;
            q[i] += d;
            assert!(physics_value(&pred, &ctx, q) > best);
        }
    }
}
