use crystal_pirnn::autodiff::{gradcheck, Tape, Tensor, Var};
use crystal_pirnn::datagen::{sample_conditions, simulate_run, ConditionRanges, Run, SimulationSetup};
use crystal_pirnn::losses::*;
use crystal_pirnn::pbm::{KineticParameters, PhysicalConstants, SolubilityModel};
use crystal_pirnn::trainer::PreparedRun;
use crystal_pirnn::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn simulated(dt: f64, seed: u64) -> Run {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cond = sample_conditions(&mut rng, 1, &ConditionRanges::default())[0];
    let setup = SimulationSetup {
        dt,
        ..SimulationSetup::default()
    };
    simulate_run(&cond, &setup).unwrap()
}

fn scales_of(run: &Run) -> [f64; 5] {
    let mut s = [0.0f64; 5];
    for r in &run.clean {
        for j in 0..5 {
            s[j] = s[j].max(r[j]);
        }
    }
    s
}

fn prepared(dt: f64, seed: u64) -> PreparedRun {
    let run = simulated(dt, seed);
    let scales = scales_of(&run);
    PreparedRun::new(&run, scales, 60.0, PhysicalConstants::default()).unwrap()
}

fn physics_at(pred: &Tensor, ctx: &PhysicsContext, logs: [f64; 6]) -> Result<f64, Error> {
    let tape = Tape::new();
    let p = tape.constant(pred.clone());
    let lp: [Var; 6] = logs.map(|v| tape.scalar(v));
    physics_loss(&p, ctx, &lp).map(|v| v.item())
}

#[test]
fn exact_trajectory_has_tiny_residual() {
    let run = prepared(1.0, 11);
    let logs = KineticParameters::reference().log_values();
    let loss = physics_at(&run.clean, &run.physics, logs).unwrap();
    assert!(loss < 1e-6, "loss {loss}");
    let off = physics_at(&run.clean, &run.physics, [0.0; 6]).unwrap();
    assert!(off > 100.0 * loss);
}

#[test]
fn constant_undersaturated_prediction_has_zero_residual() {
    let n = 8;
    let ctx = PhysicsContext {
        temperature_k: vec![320.0; n],
        scales: [1e6, 1e7, 1e8, 1e9, 0.5],
        solubility: SolubilityModel::reference(),
        consts: PhysicalConstants::default(),
        dt: 1.0,
    };
    // C = 0.1 g/g is below saturation at 320 K.
    let pred = Tensor::new(n, 5, [0.3, 0.3, 0.3, 0.3, 0.2].repeat(n)).unwrap();
    let logs = KineticParameters::reference().log_values();
    assert_eq!(physics_at(&pred, &ctx, logs).unwrap(), 0.0);
}

#[test]
fn lambda_enters_linearly() {
    let run = prepared(5.0, 3);
    let tape = Tape::new();
    let pred = tape.param(run.clean.map(|v| v * 0.97 + 0.01));
    let eta = tape.scalar(0.1);
    let logs: [Var; 6] = KineticParameters::reference().log_values().map(|v| tape.scalar(v));
    let d = data_loss(&pred, &run.observed, &run.mask, &eta, &LossConfig::default()).unwrap();
    let p = physics_loss(&pred, &run.physics, &logs).unwrap();
    let t = |l: f64| total_loss(&d, &p, l).item();
    let lhs = t(2.0) - t(0.0);
    let rhs = 2.0 * (t(1.0) - t(0.0));
    assert!((lhs - rhs).abs() <= 1e-12 * rhs.abs().max(1e-300));
    assert_eq!(t(0.0), d.item());
}

#[test]
fn physics_gradcheck_over_log_parameters() {
    let run = prepared(5.0, 5);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..5 {
        let logs: Vec<f64> = KineticParameters::reference()
            .log_values()
            .iter()
            .map(|v| v + rng.random_range(-0.3..0.3))
            .collect();
        let pred = run.clean.map(|v| v * (1.0 + 0.02 * (v * 37.0).sin()));
        let ctx = run.physics.clone();
        let err = gradcheck(
            |x| {
                let tape = x.tape();
                let p = tape.constant(pred.clone());
                let lp: [Var; 6] = std::array::from_fn(|i| x.cols(i, i + 1));
                physics_loss(&p, &ctx, &lp)
            },
            &Tensor::row(logs),
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-4, "relative error {err}");
    }
}

#[test]
fn data_loss_gradcheck_over_prediction_and_eta() {
    let run = prepared(5.0, 6);
    let n = run.clean.rows();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut pred = run.clean.clone();
    for v in pred.data_mut() {
        *v += rng.random_range(-0.3..0.3);
    }
    let mask: Vec<bool> = (0..n).map(|k| k % 3 != 1).collect();
    let obs = run.observed.clone();
    let err = gradcheck(
        |x| {
            let tape = x.tape();
            let eta = tape.scalar(0.1);
            data_loss(x, &obs, &mask, &eta, &LossConfig::default())
        },
        &pred,
        1e-6,
    )
    .unwrap();
    assert!(err < 1e-4, "relative error {err}");

    let err = gradcheck(
        |e| {
            let tape = e.tape();
            let p = tape.constant(pred.clone());
            data_loss(&p, &obs, &mask, e, &LossConfig::default())
        },
        &Tensor::scalar(0.1),
        1e-6,
    )
    .unwrap();
    assert!(err < 1e-4, "relative error {err}");
}

#[test]
fn eta_gradient_nonzero_when_terms_differ() {
    let tape = Tape::new();
    let obs = Tensor::zeros(4, 5);
    let pred = tape.constant(Tensor::full(4, 5, 0.5));
    let eta = tape.param(Tensor::scalar(0.1));
    let l = data_loss(&pred, &obs, &[true; 4], &eta, &LossConfig::default()).unwrap();
    l.backward().unwrap();
    assert!(eta.grad().unwrap().item().abs() > 0.0);
}

#[test]
fn omega_stays_inside_unit_interval() {
    for eta in [-30.0, -1.0, 0.0, 0.1, 5.0, 30.0] {
        let w = mse_weight(eta);
        assert!(w > 0.0 && w < 1.0);
    }
}

#[test]
fn mask_changes_do_not_matter_for_exact_predictions() {
    let run = prepared(5.0, 8);
    let n = run.clean.rows();
    let tape = Tape::new();
    let pred = tape.constant(run.observed.clone());
    let eta = tape.scalar(0.1);
    let cfg = LossConfig::default();
    let full = data_loss(&pred, &run.observed, &vec![true; n], &eta, &cfg).unwrap().item();
    let mut sparse = vec![false; n];
    sparse[0] = true;
    sparse[n - 1] = true;
    let two = data_loss(&pred, &run.observed, &sparse, &eta, &cfg).unwrap().item();
    assert_eq!(full, two);
}

#[test]
fn physics_residual_is_normalization_equivariant() {
    let run = prepared(5.0, 12);
    let pred = run.clean.map(|v| v * 0.95 + 0.02);
    let logs = [8.0, 0.6, -0.4, 12.0, 10.6, 0.2];
    let base = physics_at(&pred, &run.physics, logs).unwrap();
    let n = pred.rows();
    let count = (5 * (n - 2)) as f64;
    let parts: Vec<f64> = (0..5).map(|j| physics_component(&pred, &run.physics, logs, j)).collect();
    assert!((parts.iter().sum::<f64>() / count - base).abs() <= 1e-10 * base);
    let c = 3.7;
    for j in 0..5 {
        let mut ctx = run.physics.clone();
        ctx.scales[j] *= c;
        let mut p = pred.clone();
        for k in 0..n {
            p.set(k, j, p.get(k, j) / c);
        }
        // Component j keeps its raw-unit residual, so its normalized share
        // shrinks by c^2 and nothing else moves.
        let expected = base - parts[j] * (1.0 - 1.0 / (c * c)) / count;
        let got = physics_at(&p, &ctx, logs).unwrap();
        assert!((got - expected).abs() <= 1e-10 * base, "component {j}: {got} vs {expected}");
    }
}

fn physics_component(pred: &Tensor, ctx: &PhysicsContext, logs: [f64; 6], j: usize) -> f64 {
    let n = pred.rows();
    let theta = KineticParameters::from_log(logs).values();
    let mut s = 0.0;
    for k in 1..n - 1 {
        let x: [f64; 5] = std::array::from_fn(|i| pred.get(k, i) * ctx.scales[i]);
        let t = ctx.temperature_k[k];
        let cs = ctx.solubility.evaluate(t).unwrap();
        let rhs = crystal_pirnn::pbm::moment_rhs_generic(&x, &t, &cs, &theta, &ctx.consts);
        let fd = (pred.get(k + 1, j) - pred.get(k - 1, j)) / (2.0 * ctx.dt);
        s += (fd - rhs[j] / ctx.scales[j]).powi(2);
    }
    s
}

#[test]
fn physics_errors() {
    let run = prepared(5.0, 1);
    let short = run.clean.clone();
    let mut ctx = run.physics.clone();
    ctx.temperature_k.truncate(2);
    assert!(physics_at(&short, &ctx, [0.0; 6]).is_err());
    let mut ctx = run.physics.clone();
    ctx.temperature_k[3] = 500.0;
    assert!(matches!(physics_at(&run.clean, &ctx, [0.0; 6]), Err(Error::Range { .. })));
    assert!(matches!(
        physics_at(&run.clean, &run.physics, [800.0, 0.0, 0.0, 0.0, 0.0, 0.0]),
        Err(Error::Numeric(_))
    ));
}
