//! Synthetic experiment corpus: randomized cooling programs, forward
//! simulation, measurement noise, sparse observation masks and the
//! train/validation/test split.

use std::fmt;
use std::str::FromStr;

use log::{debug, warn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::integrator::{integrate, uniform_grid, IntegratorConfig, Trajectory};
use crate::pbm::{moment_rhs, KineticParameters, MomentState, PhysicalConstants, SolubilityModel};

pub const CELSIUS_TO_KELVIN: f64 = 273.15;

/// Closed sampling interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Interval {
    pub min: f64,
    pub max: f64,
}

impl Interval {
    pub const fn new(min: f64, max: f64) -> Self {
        Self { min, max }
    }

    pub fn contains(&self, v: f64) -> bool {
        (self.min..=self.max).contains(&v)
    }

    pub fn midpoint(&self) -> f64 {
        0.5 * (self.min + self.max)
    }

    fn sample(&self, rng: &mut impl Rng) -> f64 {
        if self.max > self.min {
            rng.random_range(self.min..=self.max)
        } else {
            self.min
        }
    }
}

/// Sampling ranges for the operating conditions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ConditionRanges {
    /// Plateau temperature [degC].
    pub plateau_temperature: Interval,
    /// Cooling rate magnitude [degC/min].
    pub cooling_rate: Interval,
    /// Plateau duration [min].
    pub plateau_duration: Interval,
    /// Initial concentration [g/g].
    pub c0: Interval,
    pub final_temperature: f64,
    pub t_end: f64,
}

impl Default for ConditionRanges {
    fn default() -> Self {
        Self {
            plateau_temperature: Interval::new(30.0, 50.0),
            cooling_rate: Interval::new(0.15, 0.60),
            plateau_duration: Interval::new(80.0, 140.0),
            c0: Interval::new(0.37, 0.50),
            final_temperature: 0.0,
            t_end: 500.0,
        }
    }
}

impl ConditionRanges {
    pub fn validate(&self) -> Result<()> {
        let named = [
            ("plateau_temperature", self.plateau_temperature),
            ("cooling_rate", self.cooling_rate),
            ("plateau_duration", self.plateau_duration),
            ("c0", self.c0),
        ];
        for (name, iv) in named {
            if !(iv.min.is_finite() && iv.max.is_finite() && iv.min <= iv.max) {
                return Err(Error::Config(format!(
                    "{name}: min {} must not exceed max {}",
                    iv.min, iv.max
                )));
            }
        }
        if !(self.cooling_rate.min > 0.0) || !(self.plateau_duration.min >= 0.0) || !(self.c0.min >= 0.0) {
            return Err(Error::Config(
                "cooling rate must be positive; plateau duration and c0 non-negative".into(),
            ));
        }
        if !(self.plateau_temperature.min > self.final_temperature) {
            return Err(Error::Config(
                "plateau temperatures must lie above the final temperature".into(),
            ));
        }
        // Slowest, hottest, longest program must finish cooling in time.
        let worst = self.plateau_duration.max
            + (self.plateau_temperature.max - self.final_temperature) / self.cooling_rate.min;
        if worst > self.t_end {
            return Err(Error::Config(format!(
                "cooling may end at {worst} min, after t_end = {}",
                self.t_end
            )));
        }
        Ok(())
    }
}

/// Operating conditions of one batch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConditions {
    /// T_plat [degC].
    pub plateau_temperature: f64,
    /// Magnitude of the cooling rate [degC/min].
    pub cooling_rate: f64,
    /// t_plat [min].
    pub plateau_duration: f64,
    /// Initial concentration [g solute/g solvent].
    pub c0: f64,
    pub final_temperature: f64,
    pub t_end: f64,
}

impl RunConditions {
    /// End of the linear ramp, t_cool [min].
    pub fn cooling_end(&self) -> f64 {
        self.plateau_duration + (self.plateau_temperature - self.final_temperature) / self.cooling_rate
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.cooling_rate > 0.0) {
            return Err(Error::Range {
                quantity: "cooling rate [degC/min]",
                value: self.cooling_rate,
                min: f64::MIN_POSITIVE,
                max: f64::INFINITY,
            });
        }
        let t_cool = self.cooling_end();
        if !(self.plateau_duration < t_cool && t_cool <= self.t_end) {
            return Err(Error::Range {
                quantity: "cooling end [min]",
                value: t_cool,
                min: self.plateau_duration,
                max: self.t_end,
            });
        }
        Ok(())
    }

    /// Temperature program [degC]: plateau, linear ramp, final hold.
    pub fn temperature(&self, t: f64) -> Result<f64> {
        if !(0.0..=self.t_end).contains(&t) {
            return Err(Error::Range {
                quantity: "time [min]",
                value: t,
                min: 0.0,
                max: self.t_end,
            });
        }
        Ok(self.temperature_unchecked(t))
    }

    fn temperature_unchecked(&self, t: f64) -> f64 {
        if t < self.plateau_duration {
            self.plateau_temperature
        } else if t < self.cooling_end() {
            self.plateau_temperature - self.cooling_rate * (t - self.plateau_duration)
        } else {
            self.final_temperature
        }
    }
}

pub fn temperature_profile(cond: &RunConditions, t: f64) -> Result<f64> {
    cond.temperature(t)
}

/// I.i.d. uniform draws within `ranges`.
pub fn sample_conditions(rng: &mut impl Rng, n_runs: usize, ranges: &ConditionRanges) -> Vec<RunConditions> {
    (0..n_runs)
        .map(|_| RunConditions {
            plateau_temperature: ranges.plateau_temperature.sample(rng),
            cooling_rate: ranges.cooling_rate.sample(rng),
            plateau_duration: ranges.plateau_duration.sample(rng),
            c0: ranges.c0.sample(rng),
            final_temperature: ranges.final_temperature,
            t_end: ranges.t_end,
        })
        .collect()
}

/// Seed crystals, modelled as a monodisperse population.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SeedState {
    /// Seed size [um].
    pub size_um: f64,
    /// Seed mass per g solvent, as a fraction of the solute mass scale
    /// (k_v rho mu3 converted to g/g).
    pub mass_fraction: f64,
}

impl Default for SeedState {
    fn default() -> Self {
        Self {
            size_um: 50.0,
            mass_fraction: 1e-5,
        }
    }
}

impl SeedState {
    pub fn validate(&self) -> Result<()> {
        if !(self.size_um > 0.0 && self.mass_fraction > 0.0) {
            return Err(Error::Config("seed size and mass must be positive".into()));
        }
        Ok(())
    }

    /// Initial moments for concentration `c0`.
    pub fn initial_state(&self, c0: f64, consts: &PhysicalConstants) -> MomentState {
        let l = self.size_um;
        let mu0 = self.mass_fraction / (consts.mass_balance_factor() * l.powi(3));
        MomentState {
            mu0,
            mu1: mu0 * l,
            mu2: mu0 * l * l,
            mu3: mu0 * l.powi(3),
            c: c0,
        }
    }
}

/// Everything needed to simulate a batch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimulationSetup {
    pub params: KineticParameters,
    pub solubility: SolubilityModel,
    pub consts: PhysicalConstants,
    pub seed: SeedState,
    pub integrator: IntegratorConfig,
    /// Output spacing [min].
    pub dt: f64,
}

impl Default for SimulationSetup {
    fn default() -> Self {
        Self {
            params: KineticParameters::reference(),
            solubility: SolubilityModel::reference(),
            consts: PhysicalConstants::default(),
            seed: SeedState::default(),
            integrator: IntegratorConfig::default(),
            dt: 1.0,
        }
    }
}

/// Integrates the moment model for one batch from an explicit initial state.
pub fn simulate_from(
    cond: &RunConditions,
    x0: MomentState,
    params: &KineticParameters,
    model: &SolubilityModel,
    consts: &PhysicalConstants,
    cfg: &IntegratorConfig,
    t_grid: &[f64],
) -> Result<Trajectory> {
    let rhs = |t: f64, x: &[f64; 5]| {
        let t_kelvin = cond.temperature_unchecked(t) + CELSIUS_TO_KELVIN;
        moment_rhs(&MomentState::from_array(*x), t_kelvin, params, model, consts)
    };
    integrate(rhs, x0, t_grid, cfg)
}

/// Sampling schemes for the observation mask.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scheme {
    #[default]
    Full,
    P2,
    P3,
    P5,
    P9,
}

impl Scheme {
    pub const ALL: [Scheme; 5] = [Scheme::Full, Scheme::P2, Scheme::P3, Scheme::P5, Scheme::P9];

    pub fn name(&self) -> &'static str {
        match self {
            Scheme::Full => "full",
            Scheme::P2 => "p2",
            Scheme::P3 => "p3",
            Scheme::P5 => "p5",
            Scheme::P9 => "p9",
        }
    }

    /// Observed time stamps [min], or `None` for the full grid.
    pub fn stamps(&self, cond: &RunConditions) -> Option<Vec<f64>> {
        let end = cond.t_end;
        let tp = cond.plateau_duration;
        let tc = cond.cooling_end();
        match self {
            Scheme::Full => None,
            Scheme::P2 => Some(vec![0.0, end]),
            Scheme::P3 => Some(vec![0.0, (tp / 2.0).round(), end]),
            Scheme::P5 => Some(vec![
                0.0,
                (tp / 2.0).round(),
                ((tp + tc) / 2.0).round(),
                tc.round(),
                end,
            ]),
            Scheme::P9 => Some(vec![0.0, 5.0, 15.0, 35.0, 75.0, 150.0, 250.0, 375.0, end]),
        }
    }
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Scheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Scheme::ALL
            .into_iter()
            .find(|sc| sc.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown sampling scheme {s:?}")))
    }
}

/// Visible rows of `t_grid` for `scheme`; each stamp marks its nearest grid
/// point.
pub fn downsample_mask(cond: &RunConditions, t_grid: &[f64], scheme: Scheme) -> Vec<bool> {
    let Some(stamps) = scheme.stamps(cond) else {
        return vec![true; t_grid.len()];
    };
    let mut mask = vec![false; t_grid.len()];
    for s in stamps {
        if let Some(k) = nearest_index(t_grid, s) {
            mask[k] = true;
        }
    }
    mask
}

fn nearest_index(t_grid: &[f64], t: f64) -> Option<usize> {
    t_grid
        .iter()
        .enumerate()
        .min_by(|a, b| (a.1 - t).abs().total_cmp(&(b.1 - t).abs()))
        .map(|(k, _)| k)
}

/// One simulated batch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Run {
    /// Index in generation order.
    pub id: usize,
    pub conditions: RunConditions,
    pub t_grid: Vec<f64>,
    /// Temperature at every grid point [degC], always fully observed.
    pub temperature: Vec<f64>,
    pub clean: Vec<[f64; 5]>,
    pub observed: Vec<[f64; 5]>,
    /// Row visibility for training; the same for all five states.
    pub mask: Vec<bool>,
}

impl Run {
    pub fn len(&self) -> usize {
        self.t_grid.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t_grid.is_empty()
    }

    pub fn initial_state(&self) -> MomentState {
        MomentState::from_array(self.clean[0])
    }

    pub fn clean_trajectory(&self) -> Trajectory {
        Trajectory {
            t_grid: self.t_grid.clone(),
            states: self.clean.iter().map(|r| MomentState::from_array(*r)).collect(),
        }
    }

    /// Ratio of the final to the initial particle count.
    pub fn nucleation_ratio(&self) -> f64 {
        let first = self.clean[0][0];
        let last = self.clean.last().map_or(first, |r| r[0]);
        last / first
    }

    /// Keeps grid points that are multiples of `dt`. A visible fine row
    /// marks the nearest coarse row.
    pub fn resample(&self, dt: f64) -> Result<Run> {
        let keep: Vec<usize> = (0..self.len())
            .filter(|&k| {
                let q = self.t_grid[k] / dt;
                (q - q.round()).abs() < 1e-9
            })
            .collect();
        if keep.len() < 3 || *keep.last().unwrap() != self.len() - 1 {
            return Err(Error::Dataset(format!(
                "cannot resample run {} at dt = {dt}: grid end {} is not a multiple",
                self.id,
                self.t_grid.last().copied().unwrap_or(0.0)
            )));
        }
        let t_grid: Vec<f64> = keep.iter().map(|&k| self.t_grid[k]).collect();
        let mut mask = vec![false; keep.len()];
        for (k, &m) in self.mask.iter().enumerate() {
            if m {
                if let Some(j) = nearest_index(&t_grid, self.t_grid[k]) {
                    mask[j] = true;
                }
            }
        }
        Ok(Run {
            id: self.id,
            conditions: self.conditions,
            temperature: keep.iter().map(|&k| self.temperature[k]).collect(),
            clean: keep.iter().map(|&k| self.clean[k]).collect(),
            observed: keep.iter().map(|&k| self.observed[k]).collect(),
            mask,
            t_grid,
        })
    }
}

/// Simulates one batch on a uniform grid with full observation and no noise.
pub fn simulate_run(cond: &RunConditions, setup: &SimulationSetup) -> Result<Run> {
    cond.validate()?;
    let t_grid = uniform_grid(cond.t_end, setup.dt);
    let x0 = setup.seed.initial_state(cond.c0, &setup.consts);
    let traj = simulate_from(
        cond,
        x0,
        &setup.params,
        &setup.solubility,
        &setup.consts,
        &setup.integrator,
        &t_grid,
    )?;
    let temperature = t_grid.iter().map(|&t| cond.temperature_unchecked(t)).collect();
    let clean = traj.to_rows();
    Ok(Run {
        id: 0,
        conditions: *cond,
        mask: vec![true; t_grid.len()],
        observed: clean.clone(),
        clean,
        temperature,
        t_grid,
    })
}

fn population_std(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let n = values.clone().count() as f64;
    let mean = values.clone().sum::<f64>() / n;
    (values.map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt()
}

/// Per-variable Gaussian noise scaled to `level` times the standard deviation
/// of that variable over the clean trajectory. Observations are not clamped.
pub fn add_noise(run: &Run, level: f64, rng: &mut impl Rng) -> Run {
    let mut out = run.clone();
    out.observed = run.clean.clone();
    if level == 0.0 {
        return out;
    }
    for j in 0..5 {
        let sigma = level * population_std(run.clean.iter().map(|r| r[j]));
        if !(sigma > 0.0) {
            continue;
        }
        let normal = Normal::new(0.0, sigma).expect("positive finite sigma");
        for row in out.observed.iter_mut() {
            row[j] += normal.sample(rng);
        }
    }
    out
}

/// Independent random stream for one run of a dataset.
pub fn run_rng(dataset_seed: u64, run_index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(dataset_seed);
    rng.set_stream(run_index as u64 + 1);
    rng
}

/// Inputs of [`build_dataset`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub n_runs: usize,
    pub noise_level: f64,
    /// Multiplicative solubility bias applied to the data-generating physics.
    pub solubility_shift: f64,
    pub scheme: Scheme,
    pub seed: u64,
    pub ranges: ConditionRanges,
    pub constants: PhysicalConstants,
    pub seed_state: SeedState,
    pub integrator: IntegratorConfig,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            n_runs: 100,
            noise_level: 0.0,
            solubility_shift: 0.0,
            scheme: Scheme::Full,
            seed: 0,
            ranges: ConditionRanges::default(),
            constants: PhysicalConstants::default(),
            seed_state: SeedState::default(),
            integrator: IntegratorConfig::default(),
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_runs < 5 {
            return Err(Error::Config(format!(
                "need at least 5 runs for a 6:2:2 split, got {}",
                self.n_runs
            )));
        }
        if !(self.noise_level >= 0.0 && self.noise_level.is_finite()) {
            return Err(Error::Config(format!("invalid noise level {}", self.noise_level)));
        }
        if !(self.solubility_shift > -1.0 && self.solubility_shift.is_finite()) {
            return Err(Error::Config(format!(
                "invalid solubility shift {}",
                self.solubility_shift
            )));
        }
        self.ranges.validate()?;
        self.constants.validate()?;
        self.seed_state.validate()?;
        self.integrator.validate()
    }
}

/// Split sizes for `n` runs at 6:2:2: floor for validation and test, the
/// remainder goes to training.
pub fn split_sizes(n: usize) -> (usize, usize, usize) {
    let val = n / 5;
    let test = n / 5;
    (n - val - test, val, test)
}

/// Train/validation/test runs plus everything needed to normalize them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetBundle {
    pub config: DatasetConfig,
    pub train: Vec<Run>,
    pub val: Vec<Run>,
    pub test: Vec<Run>,
    /// Per-variable maxima of the training observations.
    pub scales: [f64; 5],
    /// Maximum training temperature [degC] used to normalize the control input.
    pub temperature_scale: f64,
}

impl DatasetBundle {
    pub fn runs(&self) -> impl Iterator<Item = &Run> {
        self.train.iter().chain(&self.val).chain(&self.test)
    }

    /// Copy with the first `n` training runs kept; scales are unchanged.
    pub fn with_train_size(&self, n: usize) -> Result<DatasetBundle> {
        if n == 0 || n > self.train.len() {
            return Err(Error::Dataset(format!(
                "requested {n} training runs, have {}",
                self.train.len()
            )));
        }
        let mut out = self.clone();
        out.train.truncate(n);
        Ok(out)
    }

    /// Copy with every run resampled to spacing `dt`.
    pub fn resample(&self, dt: f64) -> Result<DatasetBundle> {
        let map = |runs: &[Run]| runs.iter().map(|r| r.resample(dt)).collect::<Result<Vec<_>>>();
        Ok(DatasetBundle {
            config: self.config.clone(),
            train: map(&self.train)?,
            val: map(&self.val)?,
            test: map(&self.test)?,
            scales: self.scales,
            temperature_scale: self.temperature_scale,
        })
    }

    /// Replaces every mask with the rows of `scheme`.
    pub fn with_scheme(&self, scheme: Scheme) -> DatasetBundle {
        let mut out = self.clone();
        out.config.scheme = scheme;
        for run in out.train.iter_mut().chain(out.val.iter_mut()).chain(out.test.iter_mut()) {
            run.mask = downsample_mask(&run.conditions, &run.t_grid, scheme);
        }
        out
    }
}

/// Max-normalization scales over the observed training entries.
pub fn normalization_scales(train: &[Run]) -> Result<([f64; 5], f64)> {
    let mut scales = [0.0f64; 5];
    let mut t_scale = 0.0f64;
    for run in train {
        for row in &run.observed {
            for j in 0..5 {
                scales[j] = scales[j].max(row[j]);
            }
        }
        for &t in &run.temperature {
            t_scale = t_scale.max(t.abs());
        }
    }
    for (j, s) in scales.iter().enumerate() {
        if !(*s > 0.0 && s.is_finite()) {
            return Err(Error::Dataset(format!(
                "degenerate scale {s} for {}",
                MomentState::NAMES[j]
            )));
        }
    }
    if !(t_scale > 0.0) {
        return Err(Error::Dataset("degenerate temperature scale".into()));
    }
    Ok((scales, t_scale))
}

/// Generates, perturbs, masks and splits a corpus.
pub fn build_dataset(cfg: &DatasetConfig) -> Result<DatasetBundle> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let conditions = sample_conditions(&mut rng, cfg.n_runs, &cfg.ranges);

    let setup = SimulationSetup {
        solubility: SolubilityModel::reference().shifted(cfg.solubility_shift),
        consts: cfg.constants,
        seed: cfg.seed_state,
        integrator: cfg.integrator,
        ..SimulationSetup::default()
    };

    let runs: Vec<Run> = conditions
        .par_iter()
        .enumerate()
        .map(|(i, cond)| {
            let mut run = simulate_run(cond, &setup).map_err(|e| Error::Run {
                run: i,
                source: Box::new(e),
            })?;
            run.id = i;
            let mut noise_rng = run_rng(cfg.seed, i);
            let mut run = add_noise(&run, cfg.noise_level, &mut noise_rng);
            run.mask = downsample_mask(cond, &run.t_grid, cfg.scheme);
            Ok(run)
        })
        .collect::<Result<_>>()?;

    for run in &runs {
        let ratio = run.nucleation_ratio();
        if ratio < 1e3 {
            warn!(
                "run {}: particle count grew only {ratio:.3e}x; seed count is not negligible",
                run.id
            );
        }
    }

    let mut order: Vec<usize> = (0..runs.len()).collect();
    rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng);
    let (n_train, n_val, _) = split_sizes(runs.len());
    let pick = |ids: &[usize]| ids.iter().map(|&i| runs[i].clone()).collect::<Vec<_>>();
    let train = pick(&order[..n_train]);
    let val = pick(&order[n_train..n_train + n_val]);
    let test = pick(&order[n_train + n_val..]);

    let (scales, temperature_scale) = normalization_scales(&train)?;
    debug!("dataset scales {scales:?}, temperature scale {temperature_scale}");
    Ok(DatasetBundle {
        config: cfg.clone(),
        train,
        val,
        test,
        scales,
        temperature_scale,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn example() -> RunConditions {
        RunConditions {
            plateau_temperature: 40.0,
            cooling_rate: 0.4,
            plateau_duration: 100.0,
            c0: 0.45,
            final_temperature: 0.0,
            t_end: 500.0,
        }
    }

    #[test]
    fn temperature_program() {
        let c = example();
        assert_eq!(c.cooling_end(), 200.0);
        assert_eq!(c.temperature(0.0).unwrap(), 40.0);
        assert_relative_eq!(c.temperature(150.0).unwrap(), 20.0, epsilon = 1e-12);
        assert_eq!(c.temperature(500.0).unwrap(), 0.0);
        assert!(matches!(c.temperature(500.5), Err(Error::Range { .. })));
        assert!(matches!(c.temperature(-1.0), Err(Error::Range { .. })));
    }

    #[test]
    fn masks() {
        let c = example();
        let grid = uniform_grid(500.0, 1.0);
        let visible = |s| {
            downsample_mask(&c, &grid, s)
                .iter()
                .enumerate()
                .filter(|(_, m)| **m)
                .map(|(k, _)| grid[k])
                .collect::<Vec<_>>()
        };
        assert_eq!(visible(Scheme::P2), vec![0.0, 500.0]);
        assert_eq!(visible(Scheme::P3), vec![0.0, 50.0, 500.0]);
        assert_eq!(visible(Scheme::P5), vec![0.0, 50.0, 150.0, 200.0, 500.0]);
        assert_eq!(visible(Scheme::P9).len(), 9);
        assert!(downsample_mask(&c, &grid, Scheme::Full).iter().all(|m| *m));
    }

    #[test]
    fn scheme_parse_roundtrip() {
        for s in Scheme::ALL {
            assert_eq!(s.name().parse::<Scheme>().unwrap(), s);
        }
        assert!("p4".parse::<Scheme>().is_err());
    }

    #[test]
    fn split_rule() {
        assert_eq!(split_sizes(100), (60, 20, 20));
        assert_eq!(split_sizes(12), (8, 2, 2));
    }

    #[test]
    fn seed_state_matches_mass_fraction() {
        let consts = PhysicalConstants::default();
        let x0 = SeedState::default().initial_state(0.4, &consts);
        assert_relative_eq!(consts.mass_balance_factor() * x0.mu3, 1e-5, max_relative = 1e-12);
        assert_relative_eq!(x0.mu1 / x0.mu0, 50.0, max_relative = 1e-12);
    }

    #[test]
    fn invalid_ranges_rejected() {
        let mut r = ConditionRanges::default();
        r.plateau_temperature = Interval::new(50.0, 30.0);
        assert!(matches!(r.validate(), Err(Error::Config(_))));
    }
}
