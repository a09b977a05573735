//! Finite-difference gradient checks of every tape primitive and of the
//! two composite losses, shared by the test suite and the CLI.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{concat, gradcheck, select, Axis, Tensor, Var};
use crate::datagen::{sample_conditions, simulate_run, ConditionRanges, SimulationSetup};
use crate::error::Result;
use crate::losses::{data_loss, physics_loss, LossConfig};
use crate::pbm::{KineticParameters, PhysicalConstants};
use crate::trainer::PreparedRun;

pub const PRIMITIVE_TOLERANCE: f64 = 1e-5;
pub const LOSS_TOLERANCE: f64 = 1e-4;
const STEP: f64 = 1e-6;

/// Contracts a matrix-valued output with fixed irregular weights so every
/// entry contributes a distinct amount to the scalar.
pub fn contract(v: &Var) -> Var {
    let (r, c) = v.shape();
    let w: Vec<f64> = (0..r * c).map(|i| 0.3 + 0.17 * i as f64).collect();
    let w = v.tape().constant(Tensor::new(r, c, w).expect("weights match shape"));
    (v * &w).sum()
}

pub fn random(rows: usize, cols: usize, lo: f64, hi: f64, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::new(rows, cols, (0..rows * cols).map(|_| rng.random_range(lo..hi)).collect())
        .expect("length matches shape")
}

pub type Case = (&'static str, Box<dyn Fn(&Var) -> Result<Var>>, Tensor);

/// One case per primitive; inputs stay away from kinks.
pub fn primitive_cases() -> Vec<Case> {
    let other = random(3, 4, 0.5, 1.5, 7);
    let right = random(4, 2, -1.0, 1.0, 8);
    let o1 = other.clone();
    let o2 = other.clone();
    let o3 = other.clone();
    let o4 = other.clone();
    let o5 = other.clone();
    vec![
        ("add", Box::new(move |x: &Var| Ok(contract(&(x + &x.tape().constant(o1.clone()))))), random(3, 4, -1.0, 1.0, 1)),
        ("sub", Box::new(move |x: &Var| Ok(contract(&(&x.tape().constant(o2.clone()) - x)))), random(3, 4, -1.0, 1.0, 2)),
        ("mul", Box::new(move |x: &Var| Ok(contract(&(x * &x.tape().constant(o3.clone()))))), random(3, 4, -1.0, 1.0, 3)),
        ("div", Box::new(move |x: &Var| Ok(contract(&(&x.tape().constant(o4.clone()) / x)))), random(3, 4, 0.5, 2.0, 4)),
        ("div_rhs", Box::new(move |x: &Var| Ok(contract(&(x / &x.tape().constant(o5.clone()))))), random(3, 4, -1.0, 1.0, 5)),
        ("broadcast", Box::new(|x: &Var| {
            let s = x.sum();
            Ok(contract(&(&(x * &s) + &s)))
        }), random(2, 3, -1.0, 1.0, 6)),
        ("neg", Box::new(|x: &Var| Ok(contract(&x.neg()))), random(3, 4, -1.0, 1.0, 9)),
        ("scale", Box::new(|x: &Var| Ok(contract(&x.scale(-2.5)))), random(3, 4, -1.0, 1.0, 10)),
        ("offset", Box::new(|x: &Var| Ok(contract(&x.offset(0.7).square()))), random(3, 4, -1.0, 1.0, 11)),
        ("matmul", Box::new(move |x: &Var| Ok(contract(&x.try_matmul(&x.tape().constant(right.clone()))?))), random(3, 4, -1.0, 1.0, 12)),
        ("matmul_rhs", Box::new(|x: &Var| {
            let left = x.tape().constant(random(2, 3, -1.0, 1.0, 13));
            Ok(contract(&left.try_matmul(x)?))
        }), random(3, 4, -1.0, 1.0, 14)),
        ("powf", Box::new(|x: &Var| Ok(contract(&x.powf(1.7)))), random(3, 4, 0.2, 2.0, 15)),
        ("exp", Box::new(|x: &Var| Ok(contract(&x.exp()))), random(3, 4, -1.0, 1.0, 16)),
        ("ln", Box::new(|x: &Var| Ok(contract(&x.ln()))), random(3, 4, 0.2, 3.0, 17)),
        ("tanh", Box::new(|x: &Var| Ok(contract(&x.tanh()))), random(3, 4, -2.0, 2.0, 18)),
        ("sigmoid", Box::new(|x: &Var| Ok(contract(&x.sigmoid()))), random(3, 4, -3.0, 3.0, 19)),
        ("softplus", Box::new(|x: &Var| Ok(contract(&x.softplus()))), random(3, 4, -3.0, 3.0, 20)),
        ("clamp_min", Box::new(|x: &Var| Ok(contract(&x.clamp_min(0.0)))), random(3, 4, 0.1, 1.0, 21)),
        ("square", Box::new(|x: &Var| Ok(contract(&x.square()))), random(3, 4, -1.0, 1.0, 22)),
        ("abs", Box::new(|x: &Var| Ok(contract(&x.abs()))), random(3, 4, 0.1, 1.0, 23)),
        ("sum", Box::new(|x: &Var| Ok(x.sum().square())), random(3, 4, -1.0, 1.0, 24)),
        ("mean", Box::new(|x: &Var| Ok(x.mean().square())), random(3, 4, -1.0, 1.0, 25)),
        ("concat_rows", Box::new(|x: &Var| Ok(contract(&concat(&[x.clone(), x.square()], Axis::Rows)))), random(3, 4, -1.0, 1.0, 26)),
        ("concat_cols", Box::new(|x: &Var| Ok(contract(&concat(&[x.exp(), x.clone()], Axis::Cols)))), random(3, 4, -1.0, 1.0, 27)),
        ("slice", Box::new(|x: &Var| Ok(contract(&x.try_slice(Axis::Cols, 1, 3)?.exp()))), random(3, 4, -1.0, 1.0, 28)),
        ("select", Box::new(|x: &Var| {
            let cond: Vec<bool> = (0..12).map(|i| i % 3 == 0).collect();
            Ok(contract(&select(cond, &x.square(), &x.exp())))
        }), random(3, 4, -1.0, 1.0, 29)),
    ]
}


#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: String,
    /// Worst relative error over all input entries.
    pub error: f64,
    pub tolerance: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.error < self.tolerance
    }
}

pub fn primitive_checks() -> Result<Vec<CheckResult>> {
    primitive_cases()
        .into_iter()
        .map(|(name, f, x)| {
            Ok(CheckResult {
                name: name.to_string(),
                error: gradcheck(&*f, &x, STEP)?,
                tolerance: PRIMITIVE_TOLERANCE,
            })
        })
        .collect()
}

/// Checks the data loss against the prediction and the noise scale, and the
/// physics loss against the log-parameters, on a simulated run.
pub fn loss_checks() -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let cond = sample_conditions(&mut rng, 1, &ConditionRanges::default())[0];
    let setup = SimulationSetup {
        dt: 5.0,
        ..SimulationSetup::default()
    };
    let run = simulate_run(&cond, &setup)?;
    let mut scales = [0.0f64; 5];
    for r in &run.clean {
        for j in 0..5 {
            scales[j] = scales[j].max(r[j]);
        }
    }
    let prepared = PreparedRun::new(&run, scales, 60.0, PhysicalConstants::default())?;
    let n = prepared.clean.rows();
    let mut pred = prepared.clean.clone();
    for v in pred.data_mut() {
        *v += rng.random_range(-0.3..0.3);
    }
    let mask: Vec<bool> = (0..n).map(|k| k % 3 != 1).collect();
    let obs = prepared.observed.clone();
    let cfg = LossConfig::default();

    let data_pred = gradcheck(
        |x| data_loss(x, &obs, &mask, &x.tape().scalar(0.1), &cfg),
        &pred,
        STEP,
    )?;
    let data_eta = gradcheck(
        |e| data_loss(&e.tape().constant(pred.clone()), &obs, &mask, e, &cfg),
        &Tensor::scalar(0.1),
        STEP,
    )?;
    let smooth = prepared.clean.map(|v| v * (1.0 + 0.02 * (v * 37.0).sin()));
    let logs: Vec<f64> = KineticParameters::reference()
        .log_values()
        .iter()
        .map(|v| v + rng.random_range(-0.3..0.3))
        .collect();
    let physics = gradcheck(
        |x| {
            let tape = x.tape();
            let lp: [Var; 6] = std::array::from_fn(|i| x.cols(i, i + 1));
            physics_loss(&tape.constant(smooth.clone()), &prepared.physics, &lp)
        },
        &Tensor::row(logs),
        STEP,
    )?;
    Ok([
        ("data_loss/prediction", data_pred),
        ("data_loss/eta", data_eta),
        ("physics_loss/log_parameters", physics),
    ]
    .into_iter()
    .map(|(name, error)| CheckResult {
        name: name.into(),
        error,
        tolerance: LOSS_TOLERANCE,
    })
    .collect())
}
