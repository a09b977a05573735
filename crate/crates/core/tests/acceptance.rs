//! End-to-end acceptance checks. Runs without the libtest harness so every
//! criterion prints its verdict even when stdout capture would hide it.
//!
//! `cargo test --test acceptance -- 1 2` runs a subset.

use std::collections::BTreeSet;
use std::process::ExitCode;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use crystal_pirnn::config::{Preset, RootConfig};
use crystal_pirnn::datagen::{
    build_dataset, sample_conditions, simulate_run, DatasetBundle, DatasetConfig, Scheme, SimulationSetup, CELSIUS_TO_KELVIN,
};
use crystal_pirnn::evaluator::{evaluate, normalize, EvalReport, ParameterRow};
use crystal_pirnn::pbm::{moment_rhs, MomentState};
use crystal_pirnn::selfcheck;
use crystal_pirnn::trainer::train_ensemble;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

struct Verdict {
    passed: bool,
    detail: String,
}

fn verdict(passed: bool, detail: String) -> Verdict {
    Verdict { passed, detail }
}

fn minutes(m: u64) -> Duration {
    Duration::from_secs(60 * m)
}

fn desk() -> RootConfig {
    RootConfig::preset(Preset::Desk)
}

fn dataset(noise: f64, shift: f64) -> DatasetBundle {
    let cfg = desk();
    let bundle = build_dataset(&DatasetConfig {
        noise_level: noise,
        solubility_shift: shift,
        ..cfg.dataset.clone()
    })
    .expect("dataset builds");
    bundle.resample(cfg.experiment.dt).expect("resampling")
}

fn train_eval(bundle: &DatasetBundle, lambda: f64) -> EvalReport {
    let cfg = desk();
    let mut settings = cfg.settings();
    settings.loss.lambda_physics = lambda;
    let (members, _) = train_ensemble(bundle, &settings, cfg.experiment.ensemble).expect("training");
    evaluate(&members, bundle).expect("evaluation")
}

fn parameter_summary(rows: &[ParameterRow]) -> String {
    rows.iter()
        .map(|r| format!("{} {:+.1}%", r.name, 100.0 * r.relative_deviation))
        .collect::<Vec<_>>()
        .join(", ")
}

fn same_bits(a: &[ParameterRow], b: &[ParameterRow]) -> bool {
    a.len() == b.len()
        && a.iter().zip(b).all(|(x, y)| {
            x.name == y.name
                && x.mean.to_bits() == y.mean.to_bits()
                && x.std.to_bits() == y.std.to_bits()
                && x.formatted == y.formatted
        })
}

// Shared trainings, reused by the criteria that read the same model.
static NOISELESS_TEN: OnceLock<EvalReport> = OnceLock::new();
static TWO_POINT: OnceLock<(EvalReport, EvalReport, DatasetBundle)> = OnceLock::new();

fn noiseless_ten() -> &'static EvalReport {
    NOISELESS_TEN.get_or_init(|| {
        let bundle = dataset(0.0, 0.0).with_train_size(10).unwrap();
        train_eval(&bundle, 1.0)
    })
}

fn two_point() -> &'static (EvalReport, EvalReport, DatasetBundle) {
    TWO_POINT.get_or_init(|| {
        let bundle = dataset(0.0, 0.0).with_scheme(Scheme::P2).with_train_size(10).unwrap();
        let plain = train_eval(&bundle, 0.0);
        let physics = train_eval(&bundle, 1e4);
        (plain, physics, bundle)
    })
}

fn rk4_oracle(
    x0: [f64; 5],
    temperature: impl Fn(f64) -> f64,
    t_end: f64,
    h: f64,
    every: usize,
    setup: &SimulationSetup,
) -> Vec<[f64; 5]> {
    let f = |t: f64, x: &[f64; 5]| {
        moment_rhs(
            &MomentState::from_array(*x),
            temperature(t) + CELSIUS_TO_KELVIN,
            &setup.params,
            &setup.solubility,
            &setup.consts,
        )
        .expect("rhs")
    };
    let axpy = |x: &[f64; 5], k: &[f64; 5], s: f64| std::array::from_fn::<f64, 5, _>(|j| x[j] + s * k[j]);
    let steps = (t_end / h).round() as usize;
    let mut x = x0;
    let mut out = vec![x0];
    for n in 0..steps {
        let t = n as f64 * h;
        let k1 = f(t, &x);
        let k2 = f(t + 0.5 * h, &axpy(&x, &k1, 0.5 * h));
        let k3 = f(t + 0.5 * h, &axpy(&x, &k2, 0.5 * h));
        let k4 = f((t + h).min(t_end), &axpy(&x, &k3, h));
        for j in 0..5 {
            x[j] += h / 6.0 * (k1[j] + 2.0 * k2[j] + 2.0 * k3[j] + k4[j]);
        }
        if (n + 1).is_multiple_of(every) {
            out.push(x);
        }
    }
    out
}

fn criterion_1() -> Verdict {
    let setup = SimulationSetup::default();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let conditions = sample_conditions(&mut rng, 10, &DatasetConfig::default().ranges);
    let mbf = setup.consts.mass_balance_factor();
    let mut max_rel = 0.0f64;
    let mut max_balance = 0.0f64;
    for cond in &conditions {
        let run = simulate_run(cond, &setup).expect("simulation");
        let h = 0.01;
        let every = (setup.dt / h).round() as usize;
        let oracle = rk4_oracle(
            run.clean[0],
            |t| cond.temperature(t.min(cond.t_end)).unwrap(),
            cond.t_end,
            h,
            every,
            &setup,
        );
        assert_eq!(oracle.len(), run.len());
        let first = run.clean[0];
        for (a, b) in run.clean.iter().zip(&oracle) {
            for j in 0..5 {
                max_rel = max_rel.max((a[j] - b[j]).abs() / b[j].abs());
            }
            let balance = a[4] + mbf * (a[3] - first[3]) - first[4];
            max_balance = max_balance.max(balance.abs() / first[4]);
        }
    }
    verdict(
        max_rel < 1e-5 && max_balance < 1e-8,
        format!("max relative error {max_rel:.2e} (< 1e-5), mass balance {max_balance:.2e} (< 1e-8)"),
    )
}

fn criterion_2() -> Verdict {
    let mut checks = selfcheck::primitive_checks().expect("primitive checks run");
    checks.extend(selfcheck::loss_checks().expect("loss checks run"));
    let failed: Vec<_> = checks.iter().filter(|c| !c.passed()).map(|c| c.name.clone()).collect();
    let worst = checks.iter().map(|c| c.error / c.tolerance).fold(0.0, f64::max);
    verdict(
        failed.is_empty(),
        format!(
            "{} checks, worst error/tolerance {worst:.2e}, failing: {failed:?}",
            checks.len()
        ),
    )
}

fn criterion_3() -> Verdict {
    let r = noiseless_ten();
    let worst = r.parameters.iter().map(|p| p.relative_deviation.abs()).fold(0.0, f64::max);
    verdict(
        worst < 0.15 && r.parameter_log_mse < 0.05,
        format!(
            "worst deviation {:.1}% (< 15%), log-MSE {:.3e} (< 0.05); {}",
            100.0 * worst,
            r.parameter_log_mse,
            parameter_summary(&r.parameters)
        ),
    )
}

fn criterion_4() -> Verdict {
    let r = noiseless_ten();
    let ode = r.ode_mse_clean.mean;
    verdict(
        r.forward_mse_clean.mean < 1e-3 && ode < 1e-3,
        format!(
            "forward {:.3e} (< 1e-3), re-evaluated ODE {ode:.3e} (< 1e-3), ODE failures {}",
            r.forward_mse_clean.mean, r.ode_failures
        ),
    )
}

fn criterion_5() -> Verdict {
    let cfg = desk();
    let bundle = dataset(0.3, 0.0).with_train_size(20).unwrap();
    let r = train_eval(&bundle, cfg.study.noise_lambda);
    let ratio = r.forward_mse.mean / r.noise_floor;
    verdict(
        (0.5..=1.5).contains(&ratio) && r.forward_mse_clean.mean < r.forward_mse.mean,
        format!(
            "vs noisy {:.3e} = {ratio:.2}x floor {:.3e} (0.5x..1.5x), vs clean {:.3e}",
            r.forward_mse.mean, r.noise_floor, r.forward_mse_clean.mean
        ),
    )
}

fn criterion_6() -> Verdict {
    let bundle = dataset(0.0, 0.10).with_train_size(20).unwrap();
    let mse: Vec<f64> = [0.0, 1.0, 1e3]
        .iter()
        .map(|&l| train_eval(&bundle, l).forward_mse_clean.mean)
        .collect();
    verdict(
        mse[1] < mse[0] / 3.0 && mse[2] > mse[1],
        format!(
            "MSE lambda=0 {:.3e}, lambda=1 {:.3e} (< {:.3e}), lambda=1e3 {:.3e} (> lambda=1)",
            mse[0],
            mse[1],
            mse[0] / 3.0,
            mse[2]
        ),
    )
}

/// Trapezoidal time integral of |mean - clean|, averaged over runs and states.
fn integrated_error(report: &EvalReport, bundle: &DatasetBundle) -> f64 {
    let mut total = 0.0;
    for (band, run) in report.bands.iter().zip(&bundle.test) {
        assert_eq!(band.run, run.id);
        let clean = normalize(&run.clean, &bundle.scales);
        let err: Vec<f64> = band
            .mean
            .iter()
            .zip(&clean)
            .map(|(p, c)| (0..5).map(|j| (p[j] - c[j]).abs()).sum::<f64>() / 5.0)
            .collect();
        for k in 1..err.len() {
            total += 0.5 * (err[k] + err[k - 1]) * (run.t_grid[k] - run.t_grid[k - 1]);
        }
    }
    total / bundle.test.len() as f64
}

/// Largest deviation at the first and last visible rows of the test runs.
fn boundary_error(report: &EvalReport, bundle: &DatasetBundle) -> f64 {
    let mut worst = 0.0f64;
    for (band, run) in report.bands.iter().zip(&bundle.test) {
        let clean = normalize(&run.clean, &bundle.scales);
        let first = run.mask.iter().position(|&m| m).unwrap();
        let last = run.mask.iter().rposition(|&m| m).unwrap();
        for k in [first, last] {
            for j in 0..5 {
                worst = worst.max((band.mean[k][j] - clean[k][j]).abs());
            }
        }
    }
    worst
}

fn criterion_7() -> Verdict {
    let (plain, physics, bundle) = two_point();
    let e0 = integrated_error(plain, bundle);
    let e1 = integrated_error(physics, bundle);
    let b0 = boundary_error(plain, bundle);
    let b1 = boundary_error(physics, bundle);
    verdict(
        e1 < e0 / 3.0 && b0 < 0.02 && b1 < 0.02,
        format!(
            "integrated error lambda=1e4 {e1:.3e} vs lambda=0 {e0:.3e} (ratio {:.2}, < 1/3); boundary {b1:.3e} / {b0:.3e} (< 0.02)",
            e1 / e0
        ),
    )
}

fn criterion_8() -> Verdict {
    let bundle = dataset(0.0, 0.0).with_scheme(Scheme::P9).with_train_size(10).unwrap();
    let r = train_eval(&bundle, 1e4);
    verdict(
        r.parameter_log_mse <= 0.10,
        format!(
            "log-MSE {:.3e} (<= 0.10); {}",
            r.parameter_log_mse,
            parameter_summary(&r.parameters)
        ),
    )
}

fn criterion_9() -> Verdict {
    let ten = noiseless_ten();
    let (_, p2, _) = two_point();
    let ten_again = train_eval(&dataset(0.0, 0.0).with_train_size(10).unwrap(), 1.0);
    let p2_again = train_eval(
        &dataset(0.0, 0.0).with_scheme(Scheme::P2).with_train_size(10).unwrap(),
        1e4,
    );
    let a = same_bits(&ten.parameters, &ten_again.parameters);
    let b = same_bits(&p2.parameters, &p2_again.parameters);
    verdict(a && b, format!("noiseless 10-run table identical: {a}, two-point table identical: {b}"))
}

type Criterion = (u32, fn() -> Verdict, Option<Duration>);

fn main() -> ExitCode {
    let criteria: [Criterion; 9] = [
        (1, criterion_1, Some(minutes(1))),
        (2, criterion_2, Some(minutes(1))),
        (3, criterion_3, Some(minutes(30))),
        (4, criterion_4, None),
        (5, criterion_5, Some(minutes(30))),
        (6, criterion_6, Some(minutes(45))),
        (7, criterion_7, Some(minutes(30))),
        (8, criterion_8, Some(minutes(30))),
        (9, criterion_9, None),
    ];
    let selected: BTreeSet<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();

    let mut failures = 0;
    for (id, check, budget) in criteria {
        if !selected.is_empty() && !selected.contains(&id) {
            continue;
        }
        let start = Instant::now();
        let v = check();
        let elapsed = start.elapsed();
        let in_budget = budget.is_none_or(|b| elapsed <= b);
        let passed = v.passed && in_budget;
        if !passed {
            failures += 1;
        }
        let budget_note = match budget {
            Some(b) => format!("{:.0}s of {}s", elapsed.as_secs_f64(), b.as_secs()),
            None => format!("{:.0}s", elapsed.as_secs_f64()),
        };
        println!(
            "criterion {id}: {} | {} | {budget_note}",
            if passed { "PASS" } else { "FAIL" },
            v.detail
        );
    }
    if failures == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failures} acceptance criteria failed");
        ExitCode::FAILURE
    }
}
