use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use crystal_pirnn::checkpoint::Checkpoint;
use crystal_pirnn::config::{Preset, RootConfig, GENERATION_DT};
use crystal_pirnn::datagen::{build_dataset, DatasetBundle, Scheme};
use crystal_pirnn::dataset_io::{load_dataset, save_dataset};
use crystal_pirnn::evaluator::{evaluate, run_lambda_sweep, run_noise_study, run_sampling_study, StudyReport};
use crystal_pirnn::selfcheck::{loss_checks, primitive_checks};
use crystal_pirnn::trainer::{resume, train, EnsembleSummary, TrainHistory, TrainedModel};
use crystal_pirnn::{Error, Result};
use rayon::prelude::*;
use sha2::{Digest, Sha256};

#[derive(Parser, Debug)]
#[command(name = "crystal-pirnn", version, about = "Physics-informed recurrent network for batch cooling crystallization")]
struct Cli {
    /// TOML configuration file; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Preset expanded before the configuration file.
    #[arg(long, global = true, value_enum)]
    preset: Option<PresetArg>,

    /// Worker threads (defaults to all cores).
    #[arg(long, global = true, env = "CRYSTAL_PIRNN_JOBS")]
    jobs: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum PresetArg {
    Desk,
    Paper,
}

impl From<PresetArg> for Preset {
    fn from(p: PresetArg) -> Self {
        match p {
            PresetArg::Desk => Preset::Desk,
            PresetArg::Paper => Preset::Paper,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum StudyKind {
    Noise,
    Lambda,
    Sampling,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Simulate a corpus and write it to disk.
    Generate {
        #[arg(long)]
        out: Option<PathBuf>,
        /// Dataset seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        noise: Option<f64>,
        #[arg(long)]
        scheme: Option<Scheme>,
        /// Overwrite a non-empty output directory.
        #[arg(long)]
        force: bool,
    },
    /// Train an ensemble on a generated dataset.
    Train {
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Seed of the first member; member i uses seed + i.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        lambda: Option<f64>,
        /// Observation mask applied to the loaded dataset.
        #[arg(long)]
        scheme: Option<Scheme>,
        /// Continue one member from a periodic checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long)]
        force: bool,
    },
    /// Evaluate checkpoints (or training output directories) as one ensemble.
    Evaluate {
        #[arg(required = true)]
        checkpoints: Vec<PathBuf>,
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        force: bool,
    },
    /// Run one of the uncertainty studies; completed cells are reused.
    Study {
        #[arg(value_enum)]
        kind: StudyKind,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Dataset seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Single physics weight instead of the configured grid.
        #[arg(long)]
        lambda: Option<f64>,
        /// Single noise level instead of the configured grid.
        #[arg(long)]
        noise: Option<f64>,
        /// Single sampling scheme instead of the configured grid.
        #[arg(long)]
        scheme: Option<Scheme>,
    },
    /// Finite-difference check of every autodiff primitive and both losses.
    Gradcheck,
}

fn exit_code(e: &Error) -> u8 {
    if e.is_io() {
        3
    } else if e.is_numeric() {
        2
    } else {
        1
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    if let Some(j) = cli.jobs {
        if j == 0 {
            return Err(Error::Config("--jobs must be positive".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(j)
            .build_global()
            .map_err(|e| Error::Config(e.to_string()))?;
    }
    let mut cfg = RootConfig::load(cli.config.as_deref(), cli.preset.map(Preset::from))?;
    match cli.command {
        Command::Generate {
            out,
            seed,
            noise,
            scheme,
            force,
        } => {
            if let Some(s) = seed {
                cfg.dataset.seed = s;
            }
            if let Some(n) = noise {
                cfg.dataset.noise_level = n;
            }
            if let Some(s) = scheme {
                cfg.dataset.scheme = s;
            }
            cfg.validate()?;
            let out = out.unwrap_or_else(|| cfg.io.dataset_dir.clone());
            prepare_out(&out, force)?;
            cmd_generate(&cfg, &out)
        }
        Command::Train {
            dataset,
            out,
            seed,
            lambda,
            scheme,
            resume,
            force,
        } => {
            if let Some(s) = seed {
                cfg.train.seed = s;
            }
            if let Some(l) = lambda {
                cfg.loss.lambda_physics = l;
            }
            cfg.validate()?;
            let dataset = dataset.unwrap_or_else(|| cfg.io.dataset_dir.clone());
            match resume {
                Some(ckpt) => cmd_resume(&dataset, scheme, &ckpt),
                None => {
                    let out = out.unwrap_or_else(|| cfg.io.out_dir.join("train"));
                    prepare_out(&out, force)?;
                    cmd_train(&cfg, &dataset, scheme, &out)
                }
            }
        }
        Command::Evaluate {
            checkpoints,
            dataset,
            out,
            force,
        } => {
            let dataset = dataset.unwrap_or_else(|| cfg.io.dataset_dir.clone());
            let out = out.unwrap_or_else(|| cfg.io.out_dir.join("eval"));
            cmd_evaluate(&checkpoints, &dataset, &out, force)
        }
        Command::Study {
            kind,
            out,
            seed,
            lambda,
            noise,
            scheme,
        } => {
            if let Some(s) = seed {
                cfg.dataset.seed = s;
            }
            if let Some(l) = lambda {
                cfg.study.noise_lambda = l;
                cfg.study.lambdas = vec![l];
                cfg.study.sampling_lambdas = vec![l];
            }
            if let Some(n) = noise {
                cfg.study.noise_levels = vec![n];
            }
            if let Some(s) = scheme {
                cfg.study.schemes = vec![s];
            }
            cfg.validate()?;
            let name = match kind {
                StudyKind::Noise => "noise",
                StudyKind::Lambda => "lambda",
                StudyKind::Sampling => "sampling",
            };
            let out = out.unwrap_or_else(|| cfg.io.out_dir.join(format!("study_{name}")));
            cmd_study(&cfg, kind, out)
        }
        Command::Gradcheck => cmd_gradcheck(),
    }
}

fn prepare_out(dir: &Path, force: bool) -> Result<()> {
    if dir.exists() {
        let non_empty = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?.next().is_some();
        if non_empty && !force {
            return Err(Error::Config(format!(
                "output directory {} is not empty (use --force to overwrite)",
                dir.display()
            )));
        }
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn to_json<T: serde::Serialize>(v: &T) -> Result<String> {
    serde_json::to_string_pretty(v).map_err(|e| Error::Serde(e.to_string()))
}

/// SHA-256 over the metadata and run files in name order.
fn dataset_checksum(dir: &Path) -> Result<String> {
    let mut names: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file())
        .collect();
    names.sort();
    let mut h = Sha256::new();
    for p in names {
        h.update(p.file_name().unwrap_or_default().as_encoded_bytes());
        h.update(fs::read(&p).map_err(|e| Error::io(&p, e))?);
    }
    Ok(hex::encode(h.finalize()))
}

fn cmd_generate(cfg: &RootConfig, out: &Path) -> Result<()> {
    let bundle = build_dataset(&cfg.dataset)?;
    save_dataset(&bundle, out)?;
    let checksum = dataset_checksum(out)?;
    println!("dataset written to {}", out.display());
    println!("dataset seed: {}", cfg.dataset.seed);
    println!(
        "split: {} train / {} validation / {} test",
        bundle.train.len(),
        bundle.val.len(),
        bundle.test.len()
    );
    println!(
        "noise: {}  shift: {}  scheme: {}",
        cfg.dataset.noise_level, cfg.dataset.solubility_shift, cfg.dataset.scheme
    );
    println!("scales (mu0 mu1 mu2 mu3 C): {:?}", bundle.scales);
    println!("temperature scale: {}", bundle.temperature_scale);
    println!("sha256: {checksum}");
    Ok(())
}

/// Loads a dataset and puts it on `dt` with the requested mask.
fn load_for_training(dir: &Path, dt: f64, scheme: Option<Scheme>) -> Result<DatasetBundle> {
    let mut bundle = load_dataset(dir)?;
    if dt > GENERATION_DT {
        bundle = bundle.resample(dt)?;
    }
    if let Some(s) = scheme {
        bundle = bundle.with_scheme(s);
    }
    Ok(bundle)
}

fn save_member(dir: &Path, model: &TrainedModel, history: &TrainHistory, settings: crystal_pirnn::trainer::Settings) -> Result<()> {
    Checkpoint::new(model.clone(), settings).save(&dir.join("model.json"))?;
    write(&dir.join("history.tsv"), &history.to_columns())
}

fn cmd_train(cfg: &RootConfig, dataset: &Path, scheme: Option<Scheme>, out: &Path) -> Result<()> {
    let bundle = load_for_training(dataset, cfg.experiment.dt, scheme)?;
    write(&out.join("config.toml"), &cfg.to_toml()?)?;
    let base = cfg.settings();
    let seeds: Vec<u64> = (0..cfg.experiment.ensemble as u64).map(|i| base.train.seed + i).collect();
    let results: Vec<(u64, Result<TrainedModel>)> = seeds
        .par_iter()
        .map(|&seed| {
            let mut s = base;
            s.train.seed = seed;
            let dir = out.join(format!("member_{seed}"));
            let r = train(&bundle, &s, Some(&dir)).and_then(|(m, h)| {
                save_member(&dir, &m, &h, s)?;
                Ok(m)
            });
            (seed, r)
        })
        .collect();
    let mut members = Vec::new();
    let mut failed = Vec::new();
    let mut first = None;
    for (seed, r) in results {
        match r {
            Ok(m) => members.push(m),
            Err(e) => {
                failed.push(seed);
                first.get_or_insert(e);
            }
        }
    }
    if let Some(e) = first {
        return Err(match e {
            Error::Io { .. } => e,
            other => Error::Ensemble {
                seeds: failed,
                first: other.to_string(),
            },
        });
    }
    let summary = EnsembleSummary::from_members(&members);
    let mut text = format!(
        "dataset seed: {}\ntraining seeds: {:?}\nlambda: {}\ntraining runs: {}\nbest validation MSE: {:.4e} ± {:.2e}\n",
        bundle.config.seed,
        seeds,
        base.loss.lambda_physics,
        bundle.train.len(),
        summary.best_val_mse_mean,
        summary.best_val_mse_std
    );
    text.push_str(&summary.table());
    write(&out.join("summary.txt"), &text)?;
    write(&out.join("summary.json"), &to_json(&summary)?)?;
    print!("{text}");
    println!("models written to {}", out.display());
    Ok(())
}

fn cmd_resume(dataset: &Path, scheme: Option<Scheme>, ckpt_path: &Path) -> Result<()> {
    let ckpt = Checkpoint::load(ckpt_path)?;
    let dt = ckpt.model.grid_dt.max(GENERATION_DT);
    let bundle = load_for_training(dataset, dt, scheme)?;
    let dir = ckpt_path.parent().unwrap_or(Path::new(".")).to_path_buf();
    let (model, history) = resume(&bundle, &ckpt, Some(&dir))?;
    save_member(&dir, &model, &history, ckpt.settings)?;
    println!("dataset seed: {}", bundle.config.seed);
    println!("training seed: {}", model.seed);
    println!("resumed at epoch {} of {}", ckpt.state.as_ref().map_or(0, |s| s.next_epoch), ckpt.settings.train.epochs);
    println!("best epoch {} validation MSE {:.4e}", model.best_epoch, model.best_val_mse);
    println!("model written to {}", dir.join("model.json").display());
    Ok(())
}

/// Expands directories into the member checkpoints they contain.
fn collect_checkpoints(paths: &[PathBuf]) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for p in paths {
        if p.is_dir() {
            let mut found: Vec<PathBuf> = fs::read_dir(p)
                .map_err(|e| Error::io(p, e))?
                .filter_map(|e| e.ok().map(|e| e.path().join("model.json")))
                .filter(|m| m.is_file())
                .collect();
            if found.is_empty() {
                return Err(Error::io(
                    p,
                    std::io::Error::new(std::io::ErrorKind::NotFound, "no member checkpoints found"),
                ));
            }
            found.sort();
            out.extend(found);
        } else {
            out.push(p.clone());
        }
    }
    Ok(out)
}

fn cmd_evaluate(paths: &[PathBuf], dataset: &Path, out: &Path, force: bool) -> Result<()> {
    let files = collect_checkpoints(paths)?;
    let models: Vec<TrainedModel> = files
        .iter()
        .map(|p| Checkpoint::load(p).map(|c| c.model))
        .collect::<Result<_>>()?;
    let dt = models[0].grid_dt.max(GENERATION_DT);
    if models.iter().any(|m| m.grid_dt != models[0].grid_dt) {
        return Err(Error::Config("checkpoints were trained on different time grids".into()));
    }
    let bundle = load_for_training(dataset, dt, None)?;
    if models.iter().any(|m| m.scales != bundle.scales) {
        return Err(Error::Dataset("checkpoint normalization does not match the dataset".into()));
    }
    let report = evaluate(&models, &bundle)?;
    prepare_out(out, force)?;
    let seeds: Vec<u64> = models.iter().map(|m| m.seed).collect();
    let text = format!(
        "dataset seed: {}\ntraining seeds: {seeds:?}\n{}",
        bundle.config.seed,
        report.summary()
    );
    write(&out.join("report.json"), &to_json(&report)?)?;
    write(&out.join("report.txt"), &text)?;
    write(&out.join("runs.tsv"), &report.run_columns())?;
    print!("{text}");
    Ok(())
}

fn cmd_study(cfg: &RootConfig, kind: StudyKind, out: PathBuf) -> Result<()> {
    fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    write(&out.join("config.toml"), &cfg.to_toml()?)?;
    let ctx = cfg.study_context(out.clone());
    let s = &cfg.study;
    let report: StudyReport = match kind {
        StudyKind::Noise => run_noise_study(&ctx, &s.noise_levels, &s.noise_train_sizes)?,
        StudyKind::Lambda => run_lambda_sweep(&ctx, &s.lambdas, s.shift, &s.lambda_train_sizes)?,
        StudyKind::Sampling => run_sampling_study(&ctx, &s.schemes, &s.sampling_lambdas, s.sampling_train_size)?,
    };
    print!("{}", report.summary());
    println!("report written to {}", out.display());
    let failed = report.failures();
    if failed > 0 {
        return Err(Error::Numeric(format!("{failed} study cells failed")));
    }
    Ok(())
}

fn cmd_gradcheck() -> Result<()> {
    let mut checks = primitive_checks()?;
    checks.extend(loss_checks()?);
    let mut failures = 0;
    for c in &checks {
        let status = if c.passed() { "PASS" } else { "FAIL" };
        if !c.passed() {
            failures += 1;
        }
        println!("{status} {:<30} {:.3e} (tolerance {:.0e})", c.name, c.error, c.tolerance);
    }
    println!("{} checks, {} failed", checks.len(), failures);
    if failures > 0 {
        return Err(Error::Numeric(format!("{failures} gradient checks failed")));
    }
    Ok(())
}
