//! Declarative experiment configuration (TOML) with desk and paper presets.
//!
//! A preset is a partial table of overrides. The user's file is merged over
//! it key by key, and only then deserialized, so unknown keys are rejected
//! and every field has a concrete value before validation.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::datagen::{DatasetConfig, Scheme};
use crate::error::{Error, Result};
use crate::evaluator::StudyContext;
use crate::losses::LossConfig;
use crate::model::ModelConfig;
use crate::trainer::{Settings, TrainConfig};

/// Spacing of the generated trajectories [min].
pub const GENERATION_DT: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    /// Coarse grid, short training and small ensembles for a workstation.
    #[default]
    Desk,
    /// Full resolution and training budget.
    Paper,
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Preset::Desk => "desk",
            Preset::Paper => "paper",
        })
    }
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Preset::Desk),
            "paper" => Ok(Preset::Paper),
            other => Err(Error::Config(format!("unknown preset {other:?} (expected desk or paper)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    /// Grid spacing used for training and evaluation [min]. Data are
    /// generated at 1 min and resampled. Default 1.
    pub dt: f64,
    /// Ensemble members per trained model. Default 5.
    pub ensemble: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            dt: GENERATION_DT,
            ensemble: 5,
        }
    }
}

/// Grids of the three studies. Defaults are the full grids.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StudyConfig {
    pub noise_levels: Vec<f64>,
    pub noise_train_sizes: Vec<usize>,
    /// Physics weight used throughout the noise study.
    pub noise_lambda: f64,
    pub lambdas: Vec<f64>,
    /// Fractional solubility bias of the data in the lambda sweep.
    pub shift: f64,
    pub lambda_train_sizes: Vec<usize>,
    pub schemes: Vec<Scheme>,
    pub sampling_lambdas: Vec<f64>,
    pub sampling_train_size: usize,
}

impl Default for StudyConfig {
    fn default() -> Self {
        Self {
            noise_levels: vec![0.0, 0.1, 0.3, 1.0],
            noise_train_sizes: vec![5, 10, 20, 40, 60],
            noise_lambda: 1.0,
            lambdas: vec![0.0, 1e-2, 1e-1, 1.0, 1e1, 1e2, 1e3],
            shift: 0.10,
            lambda_train_sizes: vec![5, 10, 20, 40, 60],
            schemes: vec![Scheme::P2, Scheme::P3, Scheme::P5, Scheme::P9],
            sampling_lambdas: vec![0.0, 1.0, 1e2, 1e4, 1e6, 1e8, 1e10],
            sampling_train_size: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IoConfig {
    /// Dataset directory read by `train` and `evaluate`. Default `dataset`.
    pub dataset_dir: PathBuf,
    /// Output root. Default `out`.
    pub out_dir: PathBuf,
}

impl Default for IoConfig {
    fn default() -> Self {
        Self {
            dataset_dir: PathBuf::from("dataset"),
            out_dir: PathBuf::from("out"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RootConfig {
    pub preset: Preset,
    pub dataset: DatasetConfig,
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
    pub experiment: ExperimentConfig,
    pub study: StudyConfig,
    pub io: IoConfig,
}

const DESK_PRESET: &str = r#"
[experiment]
dt = 5.0
ensemble = 3

[train]
epochs = 300
base_lr = 3e-3

[model]
batchnorm = false
dropout = 0.0

[study]
noise_train_sizes = [5, 10, 20]
lambdas = [0.0, 1.0, 10.0, 1000.0]
lambda_train_sizes = [20]
sampling_lambdas = [0.0, 1.0, 100.0, 10000.0]
"#;

/// Overrides applied by `preset` before the user's own values.
pub fn preset_table(preset: Preset) -> toml::Table {
    match preset {
        Preset::Desk => DESK_PRESET.parse().expect("desk preset is valid TOML"),
        Preset::Paper => toml::Table::new(),
    }
}

/// Recursively overlays `top` onto `base`.
fn merge(base: &mut toml::Table, top: toml::Table) {
    for (k, v) in top {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(t)) => merge(b, t),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

impl RootConfig {
    /// Defaults of `preset` with nothing else set.
    pub fn preset(preset: Preset) -> Self {
        Self::from_toml_str("", Some(preset)).expect("presets deserialize")
    }

    /// Parses `text`, expanding the preset named in it or `preset_override`.
    pub fn from_toml_str(text: &str, preset_override: Option<Preset>) -> Result<Self> {
        let mut user: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::Config(format!("invalid TOML: {e}")))?;
        let named = match user.remove("preset") {
            Some(toml::Value::String(s)) => Some(s.parse::<Preset>()?),
            Some(other) => return Err(Error::Config(format!("preset must be a string, got {other}"))),
            None => None,
        };
        let preset = preset_override.or(named).unwrap_or_default();
        let mut table = preset_table(preset);
        merge(&mut table, user);
        table.insert("preset".into(), toml::Value::String(preset.to_string()));
        let cfg: RootConfig = table
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads `path`, or starts from the preset alone when `path` is `None`.
    pub fn load(path: Option<&Path>, preset_override: Option<Preset>) -> Result<Self> {
        let text = match path {
            Some(p) => fs::read_to_string(p).map_err(|e| Error::io(p, e))?,
            None => String::new(),
        };
        Self::from_toml_str(&text, preset_override)
    }

    pub fn validate(&self) -> Result<()> {
        self.dataset.validate()?;
        self.settings().validate()?;
        let e = &self.experiment;
        if !(e.dt >= GENERATION_DT && e.dt.is_finite()) {
            return Err(Error::Config(format!("experiment.dt = {} must be >= {GENERATION_DT}", e.dt)));
        }
        let ratio = e.dt / GENERATION_DT;
        if (ratio - ratio.round()).abs() > 1e-9 {
            return Err(Error::Config(format!("experiment.dt = {} is not a multiple of {GENERATION_DT}", e.dt)));
        }
        if e.ensemble < 2 {
            return Err(Error::Config(format!("experiment.ensemble = {} must be at least 2", e.ensemble)));
        }
        let s = &self.study;
        let fractions = s.noise_levels.iter().chain([&s.shift]);
        if fractions.clone().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::Config("study noise levels and shift must be finite and non-negative".into()));
        }
        let lambdas = s.lambdas.iter().chain(&s.sampling_lambdas).chain([&s.noise_lambda]);
        if lambdas.clone().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::Config("study lambdas must be finite and non-negative".into()));
        }
        let sizes = s.noise_train_sizes.iter().chain(&s.lambda_train_sizes).chain([&s.sampling_train_size]);
        if sizes.clone().any(|&n| n == 0) {
            return Err(Error::Config("study training sizes must be positive".into()));
        }
        Ok(())
    }

    pub fn settings(&self) -> Settings {
        Settings {
            model: self.model,
            loss: self.loss,
            train: self.train,
        }
    }

    /// Resampling spacing, or `None` when training uses the generated grid.
    pub fn resample_dt(&self) -> Option<f64> {
        (self.experiment.dt > GENERATION_DT).then_some(self.experiment.dt)
    }

    pub fn study_context(&self, out_dir: PathBuf) -> StudyContext {
        StudyContext {
            dataset: self.dataset.clone(),
            settings: self.settings(),
            resample_dt: self.resample_dt(),
            ensemble: self.experiment.ensemble,
            out_dir,
        }
    }

    /// Fully expanded configuration as TOML.
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Serde(e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn desk_preset_values() {
        let c = RootConfig::preset(Preset::Desk);
        assert_eq!(c.experiment.dt, 5.0);
        assert_eq!(c.experiment.ensemble, 3);
        assert_eq!(c.train.epochs, 300);
        let p = RootConfig::preset(Preset::Paper);
        assert_eq!(p.train.epochs, 2000);
        assert_eq!(p.experiment.dt, 1.0);
        assert!(p.model.batchnorm);
    }

    #[test]
    fn user_values_win_over_preset() {
        let c = RootConfig::from_toml_str("preset = \"desk\"\n[train]\nepochs = 7\n", None).unwrap();
        assert_eq!(c.train.epochs, 7);
        assert_eq!(c.train.base_lr, 3e-3);
        assert_eq!(c.experiment.dt, 5.0);
    }

    #[test]
    fn override_beats_named_preset() {
        let c = RootConfig::from_toml_str("preset = \"desk\"\n", Some(Preset::Paper)).unwrap();
        assert_eq!(c.preset, Preset::Paper);
        assert_eq!(c.train.epochs, 2000);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RootConfig::from_toml_str("[train]\nepoch = 3\n", None).is_err());
        assert!(RootConfig::from_toml_str("[bogus]\n", None).is_err());
        assert!(RootConfig::from_toml_str("[dataset.ranges.c0]\nmin = 0.3\nmax = 0.4\nmid = 1\n", None).is_err());
    }

    #[test]
    fn expanded_config_round_trips() {
        let c = RootConfig::preset(Preset::Desk);
        let text = c.to_toml().unwrap();
        assert_eq!(RootConfig::from_toml_str(&text, None).unwrap(), c);
    }
}
