//! Test metrics, ensemble evaluation reports and the three uncertainty
//! studies (measurement noise, solubility bias, sparse sampling).

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datagen::{build_dataset, simulate_from, DatasetBundle, DatasetConfig, Run, Scheme};
use crate::error::{Error, Result};
use crate::integrator::{IntegratorConfig, Trajectory};
use crate::pbm::{KineticParameters, PhysicalConstants, SolubilityModel, PARAMETER_NAMES};
use crate::trainer::{format_uncertainty, mean_std, train_ensemble, PreparedRun, Settings, TrainedModel};

/// Two-sided 95% normal quantile used for the ensemble bands.
pub const CONFIDENCE_Z: f64 = 1.96;

/// Mean squared residual over the masked rows and all five components.
pub fn mse(pred: &[[f64; 5]], reference: &[[f64; 5]], mask: Option<&[bool]>) -> Result<f64> {
    if pred.len() != reference.len() {
        return Err(Error::Shape {
            op: "mse",
            lhs: (pred.len(), 5),
            rhs: (reference.len(), 5),
        });
    }
    if let Some(m) = mask {
        if m.len() != pred.len() {
            return Err(Error::Shape {
                op: "mse mask",
                lhs: (pred.len(), 5),
                rhs: (m.len(), 1),
            });
        }
    }
    let mut sum = 0.0;
    let mut count = 0usize;
    for (k, (p, r)) in pred.iter().zip(reference).enumerate() {
        if mask.is_some_and(|m| !m[k]) {
            continue;
        }
        for j in 0..5 {
            sum += (p[j] - r[j]).powi(2);
        }
        count += 5;
    }
    if count == 0 {
        return Err(Error::Contract("mse over an empty mask".into()));
    }
    Ok(sum / count as f64)
}

/// Divides every row by the per-variable scales.
pub fn normalize(rows: &[[f64; 5]], scales: &[f64; 5]) -> Vec<[f64; 5]> {
    rows.iter().map(|r| std::array::from_fn(|j| r[j] / scales[j])).collect()
}

/// Mean over the six parameters of the squared log ratio.
pub fn parameter_log_mse(learned: &KineticParameters, reference: &KineticParameters) -> f64 {
    let a = learned.log_values();
    let b = reference.log_values();
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / 6.0
}

/// Integrates the moment model for `run` with `params`, the unshifted
/// solubility curve and the run's noiseless initial state.
pub fn integrate_run(
    params: &KineticParameters,
    run: &Run,
    consts: &PhysicalConstants,
    integrator: &IntegratorConfig,
) -> Result<Trajectory> {
    // Zero rate constants (log = -inf) are allowed here; they switch a mechanism off.
    if params.physical().iter().any(|v| !v.is_finite()) {
        return Err(Error::Contract("kinetic parameters are not finite".into()));
    }
    simulate_from(
        &run.conditions,
        run.initial_state(),
        params,
        &SolubilityModel::reference(),
        consts,
        integrator,
        &run.t_grid,
    )
}

/// Re-evaluated ODE trajectory with the parameters learned by `trained`.
pub fn reevaluate_ode(
    trained: &TrainedModel,
    run: &Run,
    consts: &PhysicalConstants,
    integrator: &IntegratorConfig,
) -> Result<Trajectory> {
    let params = trained.parameters();
    if !params.is_finite() {
        return Err(Error::Contract("learned log-parameters are not finite".into()));
    }
    integrate_run(&params, run, consts, integrator)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Spread {
    pub mean: f64,
    pub std: f64,
}

impl Spread {
    fn of(values: impl Iterator<Item = f64>) -> Self {
        let (mean, std) = mean_std(values);
        Self { mean, std }
    }
}

/// Test metrics of one run, averaged over the ensemble members.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub run: usize,
    pub forward: f64,
    pub forward_clean: f64,
    /// `None` when the ODE diverged for every member.
    pub ode: Option<f64>,
    pub ode_clean: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterRow {
    pub name: String,
    pub reference: f64,
    pub mean: f64,
    pub std: f64,
    /// Parenthesis notation of `mean` and `std`.
    pub formatted: String,
    pub relative_deviation: f64,
}

/// Ensemble mean and 95% band of the normalized forward prediction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Band {
    pub run: usize,
    pub mean: Vec<[f64; 5]>,
    pub lower: Vec<[f64; 5]>,
    pub upper: Vec<[f64; 5]>,
}

/// Test-split evaluation of a trained ensemble. Errors are normalized by the
/// training scales. Spreads run over members.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub members: usize,
    /// Forward prediction against the observed (possibly noisy) test data.
    pub forward_mse: Spread,
    pub forward_mse_clean: Spread,
    /// Re-evaluated ODE against the observed test data.
    pub ode_mse: Spread,
    pub ode_mse_clean: Spread,
    /// (member, run) pairs whose ODE integration failed and were excluded.
    pub ode_failures: usize,
    /// MSE between the observed and noiseless test data.
    pub noise_floor: f64,
    /// ODE with the reference parameters and the unshifted solubility curve
    /// against the noiseless test data.
    pub reference_ode_mse_clean: Option<f64>,
    pub best_val_mse: Spread,
    pub data_loss: Spread,
    pub physics_loss: Spread,
    pub parameters: Vec<ParameterRow>,
    /// Log-scale MSE of the ensemble-mean parameters.
    pub parameter_log_mse: f64,
    pub runs: Vec<RunMetrics>,
    pub bands: Vec<Band>,
}

struct MemberRun {
    forward: Vec<[f64; 5]>,
    forward_mse: f64,
    forward_clean: f64,
    ode: Option<(f64, f64)>,
}

fn evaluate_member(m: &TrainedModel, run: &Run, prepared: &PreparedRun, bundle: &DatasetBundle) -> Result<MemberRun> {
    let observed = normalize(&run.observed, &bundle.scales);
    let clean = normalize(&run.clean, &bundle.scales);
    let forward = m.learnables.network.predict(&prepared.x0, &prepared.temps)?;
    let ode = match reevaluate_ode(m, run, &bundle.config.constants, &bundle.config.integrator) {
        Ok(t) => {
            let rows = normalize(&t.to_rows(), &bundle.scales);
            Some((mse(&rows, &observed, None)?, mse(&rows, &clean, None)?))
        }
        Err(e) if e.is_numeric() => {
            log::warn!("run {}: re-evaluated ODE failed for seed {}: {e}", run.id, m.seed);
            None
        }
        Err(e) => return Err(e),
    };
    Ok(MemberRun {
        forward_mse: mse(&forward, &observed, None)?,
        forward_clean: mse(&forward, &clean, None)?,
        forward,
        ode,
    })
}

fn band(run: usize, preds: &[&Vec<[f64; 5]>]) -> Band {
    let n = preds[0].len();
    let mut mean = vec![[0.0; 5]; n];
    let mut lower = vec![[0.0; 5]; n];
    let mut upper = vec![[0.0; 5]; n];
    for k in 0..n {
        for j in 0..5 {
            let (m, s) = mean_std(preds.iter().map(|p| p[k][j]));
            mean[k][j] = m;
            lower[k][j] = m - CONFIDENCE_Z * s;
            upper[k][j] = m + CONFIDENCE_Z * s;
        }
    }
    Band { run, mean, lower, upper }
}

fn mean_of(v: &[f64]) -> Option<f64> {
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Evaluates `members` on the test split of `bundle`.
pub fn evaluate(members: &[TrainedModel], bundle: &DatasetBundle) -> Result<EvalReport> {
    if members.is_empty() {
        return Err(Error::Contract("evaluation needs at least one model".into()));
    }
    if bundle.test.is_empty() {
        return Err(Error::Dataset("empty test split".into()));
    }
    let prepared = PreparedRun::prepare_all(&bundle.test, bundle)?;
    // results[member][run]
    let results: Vec<Vec<MemberRun>> = members
        .par_iter()
        .map(|m| {
            bundle
                .test
                .iter()
                .zip(&prepared)
                .map(|(r, p)| evaluate_member(m, r, p, bundle))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;

    let n_runs = bundle.test.len();
    let mut ode_failures = 0;
    let mut member_ode = Vec::new();
    let mut member_ode_clean = Vec::new();
    for per_run in &results {
        let ok: Vec<(f64, f64)> = per_run.iter().filter_map(|r| r.ode).collect();
        ode_failures += n_runs - ok.len();
        if !ok.is_empty() {
            member_ode.push(ok.iter().map(|o| o.0).sum::<f64>() / ok.len() as f64);
            member_ode_clean.push(ok.iter().map(|o| o.1).sum::<f64>() / ok.len() as f64);
        }
    }
    let member_mean = |f: &dyn Fn(&MemberRun) -> f64| {
        Spread::of(results.iter().map(|runs| runs.iter().map(f).sum::<f64>() / n_runs as f64))
    };

    let mut runs = Vec::with_capacity(n_runs);
    let mut bands = Vec::with_capacity(n_runs);
    let mut floor_sum = 0.0;
    let mut reference_ode = Some(0.0);
    let reference = KineticParameters::reference();
    for (i, run) in bundle.test.iter().enumerate() {
        let col: Vec<&MemberRun> = results.iter().map(|m| &m[i]).collect();
        let odes: Vec<(f64, f64)> = col.iter().filter_map(|r| r.ode).collect();
        runs.push(RunMetrics {
            run: run.id,
            forward: col.iter().map(|r| r.forward_mse).sum::<f64>() / col.len() as f64,
            forward_clean: col.iter().map(|r| r.forward_clean).sum::<f64>() / col.len() as f64,
            ode: mean_of(&odes.iter().map(|o| o.0).collect::<Vec<_>>()),
            ode_clean: mean_of(&odes.iter().map(|o| o.1).collect::<Vec<_>>()),
        });
        let preds: Vec<&Vec<[f64; 5]>> = col.iter().map(|r| &r.forward).collect();
        bands.push(band(run.id, &preds));
        let clean = normalize(&run.clean, &bundle.scales);
        floor_sum += mse(&normalize(&run.observed, &bundle.scales), &clean, None)?;
        reference_ode = match (reference_ode, integrate_run(&reference, run, &bundle.config.constants, &bundle.config.integrator)) {
            (Some(acc), Ok(t)) => Some(acc + mse(&normalize(&t.to_rows(), &bundle.scales), &clean, None)?),
            (_, Err(e)) if !e.is_numeric() => return Err(e),
            _ => None,
        };
    }

    let physical: Vec<[f64; 6]> = members.iter().map(|m| m.parameters().physical()).collect();
    let mut mean_params = [0.0; 6];
    let parameters: Vec<ParameterRow> = (0..6)
        .map(|i| {
            let (mean, std) = mean_std(physical.iter().map(|p| p[i]));
            mean_params[i] = mean;
            let r = KineticParameters::REFERENCE[i];
            ParameterRow {
                name: PARAMETER_NAMES[i].to_string(),
                reference: r,
                mean,
                std,
                formatted: format_uncertainty(mean, std),
                relative_deviation: (mean - r) / r,
            }
        })
        .collect();

    Ok(EvalReport {
        members: members.len(),
        forward_mse: member_mean(&|r| r.forward_mse),
        forward_mse_clean: member_mean(&|r| r.forward_clean),
        ode_mse: Spread::of(member_ode.into_iter()),
        ode_mse_clean: Spread::of(member_ode_clean.into_iter()),
        ode_failures,
        noise_floor: floor_sum / n_runs as f64,
        reference_ode_mse_clean: reference_ode.map(|s| s / n_runs as f64),
        best_val_mse: Spread::of(members.iter().map(|m| m.best_val_mse)),
        data_loss: Spread::of(members.iter().map(|m| m.best_data_loss)),
        physics_loss: Spread::of(members.iter().map(|m| m.best_physics_loss)),
        parameter_log_mse: parameter_log_mse(&KineticParameters::from_physical(mean_params), &reference),
        parameters,
        runs,
        bands,
    })
}

impl EvalReport {
    /// Scalar metrics by name, used for the long-format tables.
    pub fn metrics(&self) -> Vec<(String, f64)> {
        let mut out = vec![
            ("forward_mse".to_string(), self.forward_mse.mean),
            ("forward_mse_std".to_string(), self.forward_mse.std),
            ("forward_mse_clean".to_string(), self.forward_mse_clean.mean),
            ("forward_mse_clean_std".to_string(), self.forward_mse_clean.std),
            ("ode_mse".to_string(), self.ode_mse.mean),
            ("ode_mse_std".to_string(), self.ode_mse.std),
            ("ode_mse_clean".to_string(), self.ode_mse_clean.mean),
            ("ode_mse_clean_std".to_string(), self.ode_mse_clean.std),
            ("ode_failures".to_string(), self.ode_failures as f64),
            ("noise_floor".to_string(), self.noise_floor),
            ("reference_ode_mse_clean".to_string(), self.reference_ode_mse_clean.unwrap_or(f64::NAN)),
            ("best_val_mse".to_string(), self.best_val_mse.mean),
            ("data_loss".to_string(), self.data_loss.mean),
            ("physics_loss".to_string(), self.physics_loss.mean),
            ("parameter_log_mse".to_string(), self.parameter_log_mse),
        ];
        for p in &self.parameters {
            out.push((format!("{}_mean", p.name), p.mean));
            out.push((format!("{}_std", p.name), p.std));
        }
        out
    }

    /// Human-readable summary with the parameter table.
    pub fn summary(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "members: {}", self.members);
        let _ = writeln!(s, "forward MSE vs observed: {:.4e} ± {:.2e}", self.forward_mse.mean, self.forward_mse.std);
        let _ = writeln!(s, "forward MSE vs clean:    {:.4e} ± {:.2e}", self.forward_mse_clean.mean, self.forward_mse_clean.std);
        let _ = writeln!(s, "ODE MSE vs observed:     {:.4e} ± {:.2e}", self.ode_mse.mean, self.ode_mse.std);
        let _ = writeln!(s, "ODE MSE vs clean:        {:.4e} ± {:.2e}", self.ode_mse_clean.mean, self.ode_mse_clean.std);
        if self.ode_failures > 0 {
            let _ = writeln!(s, "ODE failures excluded:   {}", self.ode_failures);
        }
        let _ = writeln!(s, "noise floor:             {:.4e}", self.noise_floor);
        if let Some(r) = self.reference_ode_mse_clean {
            let _ = writeln!(s, "reference-parameter ODE: {r:.4e}");
        }
        let _ = writeln!(s, "parameter log-MSE:       {:.4e}", self.parameter_log_mse);
        let _ = writeln!(s, "{:<8} {:>12} {:>20} {:>10}", "param", "reference", "learned", "rel.dev");
        for p in &self.parameters {
            let _ = writeln!(
                s,
                "{:<8} {:>12.4e} {:>20} {:>+10.3}",
                p.name, p.reference, p.formatted, p.relative_deviation
            );
        }
        s
    }

    /// Per-run metrics as whitespace-separated columns.
    pub fn run_columns(&self) -> String {
        let mut s = String::from("run forward forward_clean ode ode_clean\n");
        let opt = |v: Option<f64>| v.map_or("nan".to_string(), |x| format!("{x:.10e}"));
        for r in &self.runs {
            let _ = writeln!(
                s,
                "{} {:.10e} {:.10e} {} {}",
                r.run,
                r.forward,
                r.forward_clean,
                opt(r.ode),
                opt(r.ode_clean)
            );
        }
        s
    }
}

/// Shared inputs of a study grid.
#[derive(Debug, Clone, PartialEq)]
pub struct StudyContext {
    pub dataset: DatasetConfig,
    pub settings: Settings,
    /// Grid spacing the generated data is resampled to before training.
    pub resample_dt: Option<f64>,
    pub ensemble: usize,
    pub out_dir: PathBuf,
}

/// One point of a study grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub noise: f64,
    pub shift: f64,
    pub scheme: Scheme,
    pub lambda: f64,
    pub train_size: usize,
}

impl Cell {
    /// File-name-safe identifier.
    pub fn key(&self) -> String {
        format!(
            "noise{}_shift{}_{}_lambda{:e}_n{}",
            self.noise, self.shift, self.scheme, self.lambda, self.train_size
        )
    }

    fn dataset_key(&self) -> String {
        format!("{}_{}", self.noise, self.shift)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum CellOutcome {
    Completed { report: Box<EvalReport> },
    Failed { error: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellRecord {
    pub cell: Cell,
    pub outcome: CellOutcome,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyReport {
    pub study: String,
    pub dataset_seed: u64,
    pub train_seed: u64,
    pub cells: Vec<CellRecord>,
}

impl StudyReport {
    pub fn failures(&self) -> usize {
        self.cells
            .iter()
            .filter(|c| matches!(c.outcome, CellOutcome::Failed { .. }))
            .count()
    }

    /// `study cell metric value` rows with a header.
    pub fn long_table(&self) -> String {
        let mut s = String::from("study\tcell\tnoise\tshift\tscheme\tlambda\ttrain_size\tmetric\tvalue\n");
        for rec in &self.cells {
            let c = &rec.cell;
            let prefix = format!(
                "{}\t{}\t{}\t{}\t{}\t{:e}\t{}",
                self.study,
                c.key(),
                c.noise,
                c.shift,
                c.scheme,
                c.lambda,
                c.train_size
            );
            match &rec.outcome {
                CellOutcome::Completed { report } => {
                    for (name, v) in report.metrics() {
                        let _ = writeln!(s, "{prefix}\t{name}\t{v:e}");
                    }
                }
                CellOutcome::Failed { .. } => {
                    let _ = writeln!(s, "{prefix}\tfailed\t1");
                }
            }
        }
        s
    }

    pub fn summary(&self) -> String {
        let mut s = format!(
            "study {}: {} cells, {} failed (dataset seed {}, training seed {})\n",
            self.study,
            self.cells.len(),
            self.failures(),
            self.dataset_seed,
            self.train_seed
        );
        for rec in &self.cells {
            match &rec.outcome {
                CellOutcome::Completed { report } => {
                    let _ = writeln!(
                        s,
                        "{:<44} forward {:.3e}  clean {:.3e}  ode {:.3e}  logmse {:.3e}",
                        rec.cell.key(),
                        report.forward_mse.mean,
                        report.forward_mse_clean.mean,
                        report.ode_mse_clean.mean,
                        report.parameter_log_mse
                    );
                }
                CellOutcome::Failed { error } => {
                    let _ = writeln!(s, "{:<44} FAILED: {error}", rec.cell.key());
                }
            }
        }
        s
    }
}

fn write_atomic(path: &Path, text: &str) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, text).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn load_completed(path: &Path, cell: &Cell) -> Option<CellRecord> {
    let text = fs::read_to_string(path).ok()?;
    let rec: CellRecord = serde_json::from_str(&text).ok()?;
    (rec.cell == *cell && matches!(rec.outcome, CellOutcome::Completed { .. })).then_some(rec)
}

fn build_study_dataset(ctx: &StudyContext, cell: &Cell) -> Result<DatasetBundle> {
    let cfg = DatasetConfig {
        noise_level: cell.noise,
        solubility_shift: cell.shift,
        ..ctx.dataset.clone()
    };
    let bundle = build_dataset(&cfg)?;
    match ctx.resample_dt {
        Some(dt) => bundle.resample(dt),
        None => Ok(bundle),
    }
}

fn run_cell(ctx: &StudyContext, bundle: &DatasetBundle, cell: &Cell) -> Result<EvalReport> {
    let bundle = bundle.with_scheme(cell.scheme).with_train_size(cell.train_size)?;
    let mut settings = ctx.settings;
    settings.loss.lambda_physics = cell.lambda;
    let (members, _) = train_ensemble(&bundle, &settings, ctx.ensemble)?;
    evaluate(&members, &bundle)
}

/// Trains and evaluates every cell, in parallel. Completed cells found under
/// `out_dir/cells` are reused, so an interrupted grid can be resumed. Writes
/// `summary.json`, `summary.txt` and `table.tsv` to `out_dir`.
pub fn run_cells(ctx: &StudyContext, study: &str, cells: Vec<Cell>) -> Result<StudyReport> {
    let cell_dir = ctx.out_dir.join("cells");
    fs::create_dir_all(&cell_dir).map_err(|e| Error::io(&cell_dir, e))?;
    let path_of = |c: &Cell| cell_dir.join(format!("{}.json", c.key()));

    let done: Vec<Option<CellRecord>> = cells.iter().map(|c| load_completed(&path_of(c), c)).collect();
    let mut datasets: BTreeMap<String, Result<DatasetBundle>> = BTreeMap::new();
    for (c, d) in cells.iter().zip(&done) {
        if d.is_none() && !datasets.contains_key(&c.dataset_key()) {
            datasets.insert(c.dataset_key(), build_study_dataset(ctx, c));
        }
    }
    let skipped = done.iter().filter(|d| d.is_some()).count();
    if skipped > 0 {
        log::info!("{study}: reusing {skipped} completed cells");
    }

    let records: Vec<CellRecord> = cells
        .into_par_iter()
        .zip(done)
        .map(|(cell, done)| -> Result<CellRecord> {
            if let Some(rec) = done {
                return Ok(rec);
            }
            log::info!("{study}: running {}", cell.key());
            let outcome = match &datasets[&cell.dataset_key()] {
                Err(e) => CellOutcome::Failed { error: e.to_string() },
                Ok(bundle) => match run_cell(ctx, bundle, &cell) {
                    Ok(report) => CellOutcome::Completed { report: Box::new(report) },
                    Err(e) => {
                        log::warn!("{study}: cell {} failed: {e}", cell.key());
                        CellOutcome::Failed { error: e.to_string() }
                    }
                },
            };
            let rec = CellRecord { cell, outcome };
            let text = serde_json::to_string(&rec).map_err(|e| Error::Serde(e.to_string()))?;
            write_atomic(&path_of(&rec.cell), &text)?;
            Ok(rec)
        })
        .collect::<Result<_>>()?;

    let report = StudyReport {
        study: study.to_string(),
        dataset_seed: ctx.dataset.seed,
        train_seed: ctx.settings.train.seed,
        cells: records,
    };
    let json = serde_json::to_string(&report).map_err(|e| Error::Serde(e.to_string()))?;
    write_atomic(&ctx.out_dir.join("summary.json"), &json)?;
    write_atomic(&ctx.out_dir.join("summary.txt"), &report.summary())?;
    write_atomic(&ctx.out_dir.join("table.tsv"), &report.long_table())?;
    Ok(report)
}

/// Noise levels x training sizes, full sampling, unshifted solubility.
pub fn noise_study_cells(noise_levels: &[f64], train_sizes: &[usize], lambda: f64) -> Vec<Cell> {
    noise_levels
        .iter()
        .flat_map(|&noise| {
            train_sizes.iter().map(move |&n| Cell {
                noise,
                shift: 0.0,
                scheme: Scheme::Full,
                lambda,
                train_size: n,
            })
        })
        .collect()
}

/// Physics weights x training sizes on data with a biased solubility curve.
pub fn lambda_sweep_cells(lambdas: &[f64], shift: f64, train_sizes: &[usize]) -> Vec<Cell> {
    lambdas
        .iter()
        .flat_map(|&lambda| {
            train_sizes.iter().map(move |&n| Cell {
                noise: 0.0,
                shift,
                scheme: Scheme::Full,
                lambda,
                train_size: n,
            })
        })
        .collect()
}

/// Sampling schemes x physics weights at a fixed training size.
pub fn sampling_study_cells(schemes: &[Scheme], lambdas: &[f64], train_size: usize) -> Vec<Cell> {
    schemes
        .iter()
        .flat_map(|&scheme| {
            lambdas.iter().map(move |&lambda| Cell {
                noise: 0.0,
                shift: 0.0,
                scheme,
                lambda,
                train_size,
            })
        })
        .collect()
}

pub fn run_noise_study(ctx: &StudyContext, noise_levels: &[f64], train_sizes: &[usize]) -> Result<StudyReport> {
    let cells = noise_study_cells(noise_levels, train_sizes, ctx.settings.loss.lambda_physics);
    run_cells(ctx, "noise", cells)
}

pub fn run_lambda_sweep(ctx: &StudyContext, lambdas: &[f64], shift: f64, train_sizes: &[usize]) -> Result<StudyReport> {
    run_cells(ctx, "lambda", lambda_sweep_cells(lambdas, shift, train_sizes))
}

pub fn run_sampling_study(
    ctx: &StudyContext,
    schemes: &[Scheme],
    lambdas: &[f64],
    train_size: usize,
) -> Result<StudyReport> {
    run_cells(ctx, "sampling", sampling_study_cells(schemes, lambdas, train_size))
}
