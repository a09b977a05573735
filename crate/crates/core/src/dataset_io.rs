//! On-disk dataset layout: `meta.toml` plus one CSV file per run.
//!
//! Floats are written with 17 significant digits so a save/load cycle is
//! lossless.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::datagen::{DatasetBundle, DatasetConfig, Run, RunConditions};
use crate::error::{Error, Result};
use crate::pbm::MomentState;

pub const DATASET_VERSION: u32 = 1;
pub const META_FILE: &str = "meta.toml";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RunEntry {
    id: usize,
    split: Split,
    file: String,
    n_points: usize,
    conditions: RunConditions,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Meta {
    version: u32,
    scales: [f64; 5],
    temperature_scale: f64,
    config: DatasetConfig,
    runs: Vec<RunEntry>,
}

fn header() -> Vec<String> {
    let mut h = vec!["t".to_string(), "T".to_string()];
    h.extend(MomentState::NAMES.iter().map(|n| n.to_string()));
    h.extend(MomentState::NAMES.iter().map(|n| format!("{n}_clean")));
    h.extend(MomentState::NAMES.iter().map(|n| format!("mask_{n}")));
    h
}

fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    let line = e.position().map_or(0, |p| p.line() as usize);
    match e.kind() {
        csv::ErrorKind::Io(_) => Error::Io {
            path: path.to_path_buf(),
            source: std::io::Error::other(e.to_string()),
        },
        _ => Error::Parse {
            path: path.to_path_buf(),
            line,
            msg: e.to_string(),
        },
    }
}

fn write_run(path: &Path, run: &Run) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    w.write_record(header()).map_err(|e| csv_error(path, e))?;
    for k in 0..run.len() {
        let mut rec = vec![fmt_f64(run.t_grid[k]), fmt_f64(run.temperature[k])];
        rec.extend(run.observed[k].iter().map(|&v| fmt_f64(v)));
        rec.extend(run.clean[k].iter().map(|&v| fmt_f64(v)));
        let m = if run.mask[k] { "1" } else { "0" };
        rec.extend(std::iter::repeat_n(m.to_string(), 5));
        w.write_record(&rec).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn read_run(path: &Path, entry: &RunEntry) -> Result<Run> {
    let parse_err = |line: usize, msg: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let mut r = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| csv_error(path, e))?;
    let found: Vec<String> = r
        .headers()
        .map_err(|e| csv_error(path, e))?
        .iter()
        .map(str::to_string)
        .collect();
    if found != header() {
        return Err(parse_err(1, format!("unexpected header {found:?}")));
    }

    let mut run = Run {
        id: entry.id,
        conditions: entry.conditions,
        t_grid: Vec::with_capacity(entry.n_points),
        temperature: Vec::with_capacity(entry.n_points),
        clean: Vec::with_capacity(entry.n_points),
        observed: Vec::with_capacity(entry.n_points),
        mask: Vec::with_capacity(entry.n_points),
    };
    let names = header();
    for rec in r.records() {
        let rec = rec.map_err(|e| csv_error(path, e))?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        let num = |j: usize| -> Result<f64> {
            rec[j]
                .trim()
                .parse::<f64>()
                .map_err(|e| parse_err(line, format!("field {}: {e}", names[j])))
        };
        run.t_grid.push(num(0)?);
        run.temperature.push(num(1)?);
        let mut obs = [0.0; 5];
        let mut clean = [0.0; 5];
        for j in 0..5 {
            obs[j] = num(2 + j)?;
            clean[j] = num(7 + j)?;
        }
        run.observed.push(obs);
        run.clean.push(clean);
        let mut visible = None;
        for j in 12..17 {
            let m = match rec[j].trim() {
                "1" => true,
                "0" => false,
                other => return Err(parse_err(line, format!("field {}: bad mask {other:?}", names[j]))),
            };
            if *visible.get_or_insert(m) != m {
                return Err(parse_err(line, "per-variable masks must agree".into()));
            }
        }
        run.mask.push(visible.unwrap_or(false));
    }
    if run.len() != entry.n_points {
        return Err(parse_err(
            run.len() + 1,
            format!("expected {} rows, found {} (truncated file?)", entry.n_points, run.len()),
        ));
    }
    Ok(run)
}

/// Writes `bundle` into directory `dir`, creating it if needed.
pub fn save_dataset(bundle: &DatasetBundle, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut entries = Vec::new();
    let splits = [
        (Split::Train, &bundle.train),
        (Split::Val, &bundle.val),
        (Split::Test, &bundle.test),
    ];
    for (split, runs) in splits {
        for run in runs.iter() {
            let file = format!("run_{:04}.csv", run.id);
            write_run(&dir.join(&file), run)?;
            entries.push(RunEntry {
                id: run.id,
                split,
                file,
                n_points: run.len(),
                conditions: run.conditions,
            });
        }
    }
    let meta = Meta {
        version: DATASET_VERSION,
        scales: bundle.scales,
        temperature_scale: bundle.temperature_scale,
        config: bundle.config.clone(),
        runs: entries,
    };
    let text = toml::to_string(&meta).map_err(|e| Error::Serde(e.to_string()))?;
    let path = dir.join(META_FILE);
    fs::write(&path, text).map_err(|e| Error::io(path, e))
}

fn toml_error(path: &Path, text: &str, e: toml::de::Error) -> Error {
    let line = e
        .span()
        .map_or(0, |s| text[..s.start.min(text.len())].lines().count().max(1));
    Error::Parse {
        path: path.to_path_buf(),
        line,
        msg: e.message().to_string(),
    }
}

/// Reads a dataset directory written by [`save_dataset`].
pub fn load_dataset(dir: &Path) -> Result<DatasetBundle> {
    let path: PathBuf = dir.join(META_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;

    // Check the version before the full schema so old files fail clearly.
    #[derive(Deserialize)]
    struct VersionOnly {
        version: Option<u32>,
    }
    if let Ok(v) = toml::from_str::<VersionOnly>(&text) {
        match v.version {
            Some(found) if found != DATASET_VERSION => {
                return Err(Error::Version {
                    found,
                    expected: DATASET_VERSION,
                })
            }
            None => {
                return Err(Error::Parse {
                    path,
                    line: 1,
                    msg: "missing version field".into(),
                })
            }
            _ => {}
        }
    }
    let meta: Meta = toml::from_str(&text).map_err(|e| toml_error(&path, &text, e))?;

    let mut bundle = DatasetBundle {
        config: meta.config,
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
        scales: meta.scales,
        temperature_scale: meta.temperature_scale,
    };
    for entry in &meta.runs {
        let run = read_run(&dir.join(&entry.file), entry)?;
        match entry.split {
            Split::Train => bundle.train.push(run),
            Split::Val => bundle.val.push(run),
            Split::Test => bundle.test.push(run),
        }
    }
    if bundle.train.is_empty() || bundle.val.is_empty() || bundle.test.is_empty() {
        return Err(Error::Dataset(format!("{}: a split is empty", dir.display())));
    }
    Ok(bundle)
}
