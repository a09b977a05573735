//! Optimization loop, learning-rate schedule, ensembles and the
//! parenthesis notation used to report ensemble statistics.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::checkpoint::Checkpoint;
use crate::datagen::{DatasetBundle, Run, CELSIUS_TO_KELVIN};
use crate::error::{Error, Result};
use crate::losses::{data_loss, physics_loss, total_loss, LossConfig, PhysicsContext, RateProjection};
use crate::model::{Mode, ModelConfig, Network};
use crate::pbm::{KineticParameters, PhysicalConstants, SolubilityModel, PARAMETER_NAMES};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub base_lr: f64,
    pub final_lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Base learning rate of the kinetic log-parameters.
    pub param_lr: f64,
    /// Adam epsilon of the kinetic log-parameters.
    pub param_eps: f64,
    /// Solve for the two rate constants in closed form before every step.
    pub rate_projection: bool,
    pub seed: u64,
    /// Write a checkpoint every this many epochs (0 disables).
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 2000,
            base_lr: 1e-3,
            final_lr: 1e-7,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            param_lr: 0.05,
            param_eps: 1e-20,
            rate_projection: true,
            seed: 0,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be positive".into()));
        }
        if !(self.base_lr > self.final_lr && self.final_lr > 0.0) {
            return Err(Error::Config(format!(
                "need base_lr > final_lr > 0, got {} and {}",
                self.base_lr, self.final_lr
            )));
        }
        if !(self.param_lr > 0.0 && self.param_eps > 0.0 && self.eps > 0.0) {
            return Err(Error::Config("learning rates and epsilons must be positive".into()));
        }
        for b in [self.beta1, self.beta2] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("adam beta {b} outside [0, 1)")));
            }
        }
        Ok(())
    }

    /// Learning rate of the kinetic parameters, annealed by the same ratio.
    fn param_schedule(&self, epoch: usize) -> f64 {
        let ratio = self.final_lr / self.base_lr;
        cosine_lr(epoch, self.epochs, self.param_lr, self.param_lr * ratio)
    }
}

/// `final + 0.5 (base - final) (1 + cos(pi epoch / total))`.
pub fn cosine_lr(epoch: usize, total: usize, base: f64, final_lr: f64) -> f64 {
    let frac = if total == 0 { 1.0 } else { epoch as f64 / total as f64 };
    final_lr + 0.5 * (base - final_lr) * (1.0 + (PI * frac).cos())
}

/// Adam with bias correction over a fixed list of tensors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(shapes: &[(usize, usize)], beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            beta1,
            beta2,
            eps,
            step: 0,
            m: shapes.iter().map(|&(r, c)| Tensor::zeros(r, c)).collect(),
            v: shapes.iter().map(|&(r, c)| Tensor::zeros(r, c)).collect(),
        }
    }

    pub fn update(&mut self, params: &mut [&mut Tensor], grads: &[Tensor], lr: f64) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::Contract(format!(
                "optimizer tracks {} tensors, got {} parameters and {} gradients",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != g.shape() || p.shape() != self.m[i].shape() {
                return Err(Error::Shape {
                    op: "adam",
                    lhs: p.shape(),
                    rhs: g.shape(),
                });
            }
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            let (pd, gd) = (p.data_mut(), g.data());
            for (k, &gk) in gd.iter().enumerate() {
                let mk = &mut m.data_mut()[k];
                *mk = self.beta1 * *mk + (1.0 - self.beta1) * gk;
                let mhat = *mk / bc1;
                let vk = &mut v.data_mut()[k];
                *vk = self.beta2 * *vk + (1.0 - self.beta2) * gk * gk;
                let vhat = *vk / bc2;
                pd[k] -= lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Everything the optimizer changes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Learnables {
    pub network: Network,
    pub eta: f64,
    pub log_params: [f64; 6],
}

impl Learnables {
    pub fn new(model: ModelConfig, eta: f64, seed: u64) -> Result<Self> {
        Ok(Self {
            network: Network::new(model, seed)?,
            eta,
            log_params: KineticParameters::unit().log_values(),
        })
    }

    pub fn parameters(&self) -> KineticParameters {
        KineticParameters::from_log(self.log_params)
    }

    /// Number of tensors handed to the optimizers.
    pub fn tensor_count(&self) -> usize {
        self.network.param_names().len() + 1 + self.log_params.len()
    }
}

/// A training, validation or test run in model units.
#[derive(Debug, Clone)]
pub struct PreparedRun {
    pub id: usize,
    pub x0: [f64; 5],
    pub temps: Vec<f64>,
    pub observed: Tensor,
    pub clean: Tensor,
    pub mask: Vec<bool>,
    pub physics: PhysicsContext,
}

impl PreparedRun {
    /// Normalizes `run`. The initial state is the noiseless one since seed
    /// loading and starting concentration are set, not measured.
    pub fn new(
        run: &Run,
        scales: [f64; 5],
        temperature_scale: f64,
        consts: PhysicalConstants,
    ) -> Result<Self> {
        let n = run.len();
        if n < 3 {
            return Err(Error::Dataset(format!("run {} has only {n} points", run.id)));
        }
        let dt = run.t_grid[1] - run.t_grid[0];
        let norm = |rows: &[[f64; 5]]| {
            Tensor::new(
                n,
                5,
                rows.iter()
                    .flat_map(|r| (0..5).map(move |j| r[j] / scales[j]))
                    .collect(),
            )
        };
        let x0 = std::array::from_fn(|j| run.clean[0][j] / scales[j]);
        Ok(Self {
            id: run.id,
            x0,
            temps: run.temperature.iter().map(|t| t / temperature_scale).collect(),
            observed: norm(&run.observed)?,
            clean: norm(&run.clean)?,
            mask: run.mask.clone(),
            physics: PhysicsContext {
                temperature_k: run.temperature.iter().map(|t| t + CELSIUS_TO_KELVIN).collect(),
                scales,
                solubility: SolubilityModel::reference(),
                consts,
                dt,
            },
        })
    }

    pub fn prepare_all(runs: &[Run], bundle: &DatasetBundle) -> Result<Vec<Self>> {
        runs.iter()
            .map(|r| Self::new(r, bundle.scales, bundle.temperature_scale, bundle.config.constants))
            .collect()
    }
}

/// Mean squared error over every entry.
pub fn mse_rows(pred: &[[f64; 5]], target: &Tensor) -> f64 {
    let mut s = 0.0;
    for (k, row) in pred.iter().enumerate() {
        for (j, v) in row.iter().enumerate() {
            s += (v - target.get(k, j)).powi(2);
        }
    }
    s / (pred.len() * 5) as f64
}

/// Mean over runs of the full-trajectory forward-prediction MSE against the
/// observations, in eval mode.
pub fn forward_mse(network: &Network, runs: &[PreparedRun]) -> Result<f64> {
    let mut total = 0.0;
    for r in runs {
        let pred = network.predict(&r.x0, &r.temps)?;
        total += mse_rows(&pred, &r.observed);
    }
    Ok(total / runs.len() as f64)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epoch: Vec<usize>,
    pub data_loss: Vec<f64>,
    /// Physics loss multiplied by lambda.
    pub physics_loss: Vec<f64>,
    pub val_mse: Vec<f64>,
    pub lr: Vec<f64>,
    pub eta: Vec<f64>,
    pub params: Vec<[f64; 6]>,
}

impl TrainHistory {
    pub fn len(&self) -> usize {
        self.epoch.len()
    }

    pub fn is_empty(&self) -> bool {
        self.epoch.is_empty()
    }

    /// Whitespace-separated columns with a header line.
    pub fn to_columns(&self) -> String {
        let mut out = String::from("epoch data_loss physics_loss val_mse lr eta");
        for n in PARAMETER_NAMES {
            out.push(' ');
            out.push_str(n);
        }
        out.push('\n');
        for i in 0..self.len() {
            let _ = write!(
                out,
                "{} {:.10e} {:.10e} {:.10e} {:.10e} {:.10e}",
                self.epoch[i], self.data_loss[i], self.physics_loss[i], self.val_mse[i], self.lr[i], self.eta[i]
            );
            for p in self.params[i] {
                let _ = write!(out, " {p:.10e}");
            }
            out.push('\n');
        }
        out
    }
}

/// Result of one training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainedModel {
    pub learnables: Learnables,
    pub best_epoch: usize,
    pub best_val_mse: f64,
    /// Mean training data loss in the selected epoch.
    #[serde(default)]
    pub best_data_loss: f64,
    /// Mean weighted physics loss in the selected epoch.
    #[serde(default)]
    pub best_physics_loss: f64,
    pub lambda: f64,
    pub seed: u64,
    /// Time step of the training grid [min].
    #[serde(default)]
    pub grid_dt: f64,
    pub scales: [f64; 5],
    pub temperature_scale: f64,
}

impl TrainedModel {
    pub fn parameters(&self) -> KineticParameters {
        self.learnables.parameters()
    }
}

/// Grouping of hyperparameters for one training.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
#[derive(Default)]
pub struct Settings {
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
}

impl Settings {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.loss.validate()?;
        self.train.validate()
    }
}

struct StepOutput {
    data: f64,
    physics: f64,
    stats: Option<(Vec<f64>, Vec<f64>)>,
    net_grads: Vec<Tensor>,
    eta_grad: f64,
    param_grads: [f64; 6],
}

fn grad_or_zero(v: &Var) -> Tensor {
    v.grad().unwrap_or_else(|| {
        let (r, c) = v.shape();
        Tensor::zeros(r, c)
    })
}

/// Latest detached prediction of every training run, used to project the
/// rate constants.
struct ProjectionCache<'a> {
    runs: &'a [PreparedRun],
    predictions: Vec<Option<Vec<[f64; 5]>>>,
}

fn rows_of(t: &Tensor) -> Vec<[f64; 5]> {
    (0..t.rows()).map(|k| std::array::from_fn(|j| t.get(k, j))).collect()
}

fn step_run(
    l: &mut Learnables,
    index: usize,
    run: &PreparedRun,
    loss_cfg: &LossConfig,
    cache: Option<&mut ProjectionCache>,
    rng: &mut ChaCha8Rng,
) -> Result<StepOutput> {
    let tape = Tape::new();
    let bound = l.network.bind(&tape);
    let eta = tape.param(Tensor::scalar(l.eta));
    let physics_on = loss_cfg.lambda_physics > 0.0;
    let rollout = l.network.rollout(&bound, &run.x0, &run.temps, Mode::Train, rng)?;
    let pred = rollout.trajectory;
    if let (true, Some(cache)) = (physics_on, cache) {
        cache.predictions[index] = Some(pred.with_value(rows_of));
        project_rates(l, &cache.predictions, cache.runs)?;
    }
    let log_params: [Var; 6] = std::array::from_fn(|i| {
        let t = Tensor::scalar(l.log_params[i]);
        if physics_on {
            tape.param(t)
        } else {
            tape.constant(t)
        }
    });
    let data = data_loss(&pred, &run.observed, &run.mask, &eta, loss_cfg)?;
    let (loss, physics) = if physics_on {
        let p = physics_loss(&pred, &run.physics, &log_params)?;
        (total_loss(&data, &p, loss_cfg.lambda_physics), p.item() * loss_cfg.lambda_physics)
    } else {
        (data.clone(), 0.0)
    };
    if !loss.item().is_finite() {
        return Err(Error::Numeric(format!("non-finite loss {}", loss.item())));
    }
    loss.backward()?;
    let net_grads: Vec<Tensor> = bound.params().into_iter().map(grad_or_zero).collect();
    let eta_grad = grad_or_zero(&eta).item();
    let param_grads = std::array::from_fn(|i| grad_or_zero(&log_params[i]).item());
    let finite = net_grads.iter().all(Tensor::is_finite)
        && eta_grad.is_finite()
        && param_grads.iter().all(|g: &f64| g.is_finite());
    if !finite {
        return Err(Error::Numeric("non-finite gradient".into()));
    }
    Ok(StepOutput {
        data: data.item(),
        physics,
        stats: rollout.batch_stats,
        net_grads,
        eta_grad,
        param_grads,
    })
}

/// Closed-form rate constants over the latest prediction of every run.
fn project_rates(l: &mut Learnables, cache: &[Option<Vec<[f64; 5]>>], runs: &[PreparedRun]) -> Result<()> {
    let mut acc = RateProjection::default();
    for (pred, run) in cache.iter().zip(runs) {
        if let Some(p) = pred {
            acc = acc.merge(RateProjection::from_prediction(p, &run.physics, &l.log_params)?);
        }
    }
    let (kb, kg) = acc.log_rates();
    if let Some(v) = kb {
        l.log_params[0] = v;
    }
    if let Some(v) = kg {
        l.log_params[3] = v;
    }
    Ok(())
}

/// Trains one model on the training split of `bundle`, selecting the epoch
/// with the lowest validation forward-prediction MSE.
pub fn train(
    bundle: &DatasetBundle,
    settings: &Settings,
    checkpoint_dir: Option<&Path>,
) -> Result<(TrainedModel, TrainHistory)> {
    settings.validate()?;
    let train_runs = PreparedRun::prepare_all(&bundle.train, bundle)?;
    let val_runs = PreparedRun::prepare_all(&bundle.val, bundle)?;
    if train_runs.is_empty() || val_runs.is_empty() {
        return Err(Error::Dataset("training needs non-empty train and validation splits".into()));
    }
    train_prepared(&train_runs, &val_runs, bundle, settings, checkpoint_dir)
}

/// Resumable optimizer state, stored in periodic checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub learnables: Learnables,
    /// First epoch still to run.
    pub next_epoch: usize,
    net_opt: Adam,
    param_opt: Adam,
    order: Vec<usize>,
    order_rng_pos: u128,
    dropout_rng_pos: u128,
    best: Option<BestSnapshot>,
    projection: Vec<Option<Vec<[f64; 5]>>>,
    pub history: TrainHistory,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct BestSnapshot {
    val_mse: f64,
    epoch: usize,
    data_loss: f64,
    physics_loss: f64,
    learnables: Learnables,
}

impl TrainState {
    fn fresh(settings: &Settings, n_train: usize) -> Result<Self> {
        let tc = &settings.train;
        let l = Learnables::new(settings.model, settings.loss.eta_init, tc.seed)?;
        let mut net_shapes: Vec<(usize, usize)> = l.network.clone().params_mut().iter().map(|t| t.shape()).collect();
        net_shapes.push((1, 1));
        Ok(Self {
            learnables: l,
            next_epoch: 0,
            net_opt: Adam::new(&net_shapes, tc.beta1, tc.beta2, tc.eps),
            param_opt: Adam::new(&[(1, 1); 6], tc.beta1, tc.beta2, tc.param_eps),
            order: (0..n_train).collect(),
            order_rng_pos: 0,
            dropout_rng_pos: 0,
            best: None,
            projection: vec![None; n_train],
            history: TrainHistory::default(),
        })
    }

    fn rng(seed: u64, stream: u64, pos: u128) -> ChaCha8Rng {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        r.set_stream(stream);
        r.set_word_pos(pos);
        r
    }
}

/// Continues the training saved in `checkpoint` up to its configured epoch
/// budget. The history in the result covers every epoch from 0.
pub fn resume(
    bundle: &DatasetBundle,
    checkpoint: &Checkpoint,
    checkpoint_dir: Option<&Path>,
) -> Result<(TrainedModel, TrainHistory)> {
    let state = checkpoint
        .state
        .clone()
        .ok_or_else(|| Error::Config("checkpoint holds no resumable training state".into()))?;
    let settings = &checkpoint.settings;
    settings.validate()?;
    let train_runs = PreparedRun::prepare_all(&bundle.train, bundle)?;
    let val_runs = PreparedRun::prepare_all(&bundle.val, bundle)?;
    if state.order.len() != train_runs.len() {
        return Err(Error::Dataset(format!(
            "checkpoint was trained on {} runs, dataset has {}",
            state.order.len(),
            train_runs.len()
        )));
    }
    train_from(&train_runs, &val_runs, bundle, settings, checkpoint_dir, state)
}

fn train_prepared(
    train_runs: &[PreparedRun],
    val_runs: &[PreparedRun],
    bundle: &DatasetBundle,
    settings: &Settings,
    checkpoint_dir: Option<&Path>,
) -> Result<(TrainedModel, TrainHistory)> {
    let state = TrainState::fresh(settings, train_runs.len())?;
    train_from(train_runs, val_runs, bundle, settings, checkpoint_dir, state)
}

fn train_from(
    train_runs: &[PreparedRun],
    val_runs: &[PreparedRun],
    bundle: &DatasetBundle,
    settings: &Settings,
    checkpoint_dir: Option<&Path>,
    mut st: TrainState,
) -> Result<(TrainedModel, TrainHistory)> {
    let tc = &settings.train;
    let lc = &settings.loss;
    let physics_on = lc.lambda_physics > 0.0;
    if !physics_on {
        log::info!("physics disabled; PBM parameters frozen");
    }
    let mut order_rng = TrainState::rng(tc.seed, 1, st.order_rng_pos);
    let mut dropout_rng = TrainState::rng(tc.seed, 2, st.dropout_rng_pos);
    let mut cache = ProjectionCache {
        runs: train_runs,
        predictions: std::mem::take(&mut st.projection),
    };
    let model_of = |l: &Learnables, epoch: usize, val: f64, data: f64, phys: f64| TrainedModel {
        learnables: l.clone(),
        best_epoch: epoch,
        best_val_mse: val,
        best_data_loss: data,
        best_physics_loss: phys,
        lambda: lc.lambda_physics,
        seed: tc.seed,
        grid_dt: train_runs[0].physics.dt,
        scales: bundle.scales,
        temperature_scale: bundle.temperature_scale,
    };

    for epoch in st.next_epoch..tc.epochs {
        let l = &mut st.learnables;
        let lr = cosine_lr(epoch, tc.epochs, tc.base_lr, tc.final_lr);
        let plr = tc.param_schedule(epoch);
        st.order.shuffle(&mut order_rng);
        let (mut data_sum, mut phys_sum) = (0.0, 0.0);
        for &j in &st.order {
            let run = &train_runs[j];
            let ctx = |e: Error| Error::Training {
                epoch,
                run: run.id,
                source: Box::new(e),
            };
            let projection = (physics_on && tc.rate_projection).then_some(&mut cache);
            let out = step_run(l, j, run, lc, projection, &mut dropout_rng).map_err(ctx)?;
            data_sum += out.data;
            phys_sum += out.physics;
            if let Some(stats) = &out.stats {
                l.network.update_running_stats(stats);
            }
            {
                let eta = &mut Tensor::scalar(l.eta);
                let mut params = l.network.params_mut();
                params.push(eta);
                let mut grads = out.net_grads;
                grads.push(Tensor::scalar(out.eta_grad));
                st.net_opt.update(&mut params, &grads, lr).map_err(ctx)?;
                l.eta = eta.item();
            }
            if physics_on {
                let mut lp: Vec<Tensor> = l.log_params.iter().map(|&v| Tensor::scalar(v)).collect();
                let grads: Vec<Tensor> = out.param_grads.iter().map(|&g| Tensor::scalar(g)).collect();
                let mut refs: Vec<&mut Tensor> = lp.iter_mut().collect();
                st.param_opt.update(&mut refs, &grads, plr).map_err(ctx)?;
                for (dst, src) in l.log_params.iter_mut().zip(&lp) {
                    *dst = src.item();
                }
            }
        }
        if !l.network.is_finite() || l.log_params.iter().any(|v| !v.is_finite()) {
            return Err(Error::Training {
                epoch,
                run: usize::MAX,
                source: Box::new(Error::Numeric("parameters became non-finite".into())),
            });
        }
        let val = forward_mse(&l.network, val_runs).map_err(|e| Error::Training {
            epoch,
            run: usize::MAX,
            source: Box::new(e),
        })?;
        let n = train_runs.len() as f64;
        let (data, phys) = (data_sum / n, phys_sum / n);
        let h = &mut st.history;
        h.epoch.push(epoch);
        h.data_loss.push(data);
        h.physics_loss.push(phys);
        h.val_mse.push(val);
        h.lr.push(lr);
        h.eta.push(l.eta);
        h.params.push(l.parameters().physical());
        log::debug!("epoch {epoch}: data {data:.3e} physics {phys:.3e} val {val:.3e}");
        if st.best.as_ref().is_none_or(|b| val < b.val_mse) {
            st.best = Some(BestSnapshot {
                val_mse: val,
                epoch,
                data_loss: data,
                physics_loss: phys,
                learnables: l.clone(),
            });
        }
        st.next_epoch = epoch + 1;
        if let Some(dir) = checkpoint_dir {
            if tc.checkpoint_every > 0 && st.next_epoch % tc.checkpoint_every == 0 {
                st.order_rng_pos = order_rng.get_word_pos();
                st.dropout_rng_pos = dropout_rng.get_word_pos();
                st.projection = cache.predictions.clone();
                let snapshot = model_of(&st.learnables, epoch, val, data, phys);
                let mut ckpt = Checkpoint::new(snapshot, *settings);
                ckpt.state = Some(st.clone());
                st.projection.clear();
                ckpt.save(&dir.join(format!("epoch_{:05}.json", st.next_epoch)))?;
            }
        }
    }
    let b = st
        .best
        .as_ref()
        .ok_or_else(|| Error::Config("no epochs left to train".into()))?;
    Ok((
        model_of(&b.learnables, b.epoch, b.val_mse, b.data_loss, b.physics_loss),
        st.history,
    ))
}

/// Mean and population standard deviation of each kinetic parameter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleSummary {
    pub mean: [f64; 6],
    pub std: [f64; 6],
    pub best_val_mse_mean: f64,
    pub best_val_mse_std: f64,
}

impl EnsembleSummary {
    pub fn from_members(members: &[TrainedModel]) -> Self {
        let params: Vec<[f64; 6]> = members.iter().map(|m| m.parameters().physical()).collect();
        let mut mean = [0.0; 6];
        let mut std = [0.0; 6];
        for i in 0..6 {
            let (m, s) = mean_std(params.iter().map(|p| p[i]));
            mean[i] = m;
            std[i] = s;
        }
        let (vm, vs) = mean_std(members.iter().map(|m| m.best_val_mse));
        Self {
            mean,
            std,
            best_val_mse_mean: vm,
            best_val_mse_std: vs,
        }
    }

    /// One `name value` line per parameter in parenthesis notation.
    pub fn table(&self) -> String {
        let mut out = String::new();
        for i in 0..6 {
            let _ = writeln!(out, "{:<8} {}", PARAMETER_NAMES[i], format_uncertainty(self.mean[i], self.std[i]));
        }
        out
    }
}

pub fn mean_std(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let v: Vec<f64> = values.collect();
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    // sum / n can round away from a value repeated n times.
    if v.iter().all(|&x| x == v[0]) {
        return (v[0], 0.0);
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Trains `n_seeds` members with seeds `seed, seed + 1, ...` in parallel.
pub fn train_ensemble(
    bundle: &DatasetBundle,
    settings: &Settings,
    n_seeds: usize,
) -> Result<(Vec<TrainedModel>, EnsembleSummary)> {
    if n_seeds < 2 {
        return Err(Error::Config(format!("an ensemble needs at least 2 members, got {n_seeds}")));
    }
    settings.validate()?;
    let train_runs = PreparedRun::prepare_all(&bundle.train, bundle)?;
    let val_runs = PreparedRun::prepare_all(&bundle.val, bundle)?;
    let results: Vec<(u64, Result<TrainedModel>)> = (0..n_seeds as u64)
        .into_par_iter()
        .map(|i| {
            let mut s = *settings;
            s.train.seed = settings.train.seed + i;
            let r = train_prepared(&train_runs, &val_runs, bundle, &s, None).map(|(m, _)| m);
            (s.train.seed, r)
        })
        .collect();
    let mut members = Vec::with_capacity(n_seeds);
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
        return Err(Error::Ensemble {
            seeds: failed,
            first: e.to_string(),
        });
    }
    let summary = EnsembleSummary::from_members(&members);
    Ok((members, summary))
}

fn superscript(e: i32) -> String {
    e.to_string()
        .chars()
        .map(|c| match c {
            '-' => '⁻',
            '0' => '⁰',
            '1' => '¹',
            '2' => '²',
            '3' => '³',
            '4' => '⁴',
            '5' => '⁵',
            '6' => '⁶',
            '7' => '⁷',
            '8' => '⁸',
            '9' => '⁹',
            other => other,
        })
        .collect()
}

/// Formats `mean ± std` with the uncertainty as one digit in parentheses
/// applying to the last printed digit, e.g. `1.974(3)` or `5.376(9)×10³`.
/// Magnitudes outside [1e-2, 1e3) use a power of ten.
pub fn format_uncertainty(mean: f64, std: f64) -> String {
    if !mean.is_finite() || !std.is_finite() {
        return format!("{mean}({std})");
    }
    let exp10 = if mean == 0.0 {
        0
    } else {
        mean.abs().log10().floor() as i32
    };
    let sci = !(-2..3).contains(&exp10);
    let (m, s) = if sci {
        let f = 10f64.powi(exp10);
        (mean / f, std / f)
    } else {
        (mean, std)
    };
    let s = s.abs();
    let (decimals, digit) = if s == 0.0 {
        (3usize, 0u64)
    } else {
        let mut d = (-s.log10().floor()) as i32;
        let mut digit = (s * 10f64.powi(d)).round();
        if digit >= 10.0 {
            d -= 1;
            digit = (s * 10f64.powi(d)).round();
        }
        (d.max(0) as usize, digit as u64)
    };
    let body = format!("{m:.decimals$}({digit})");
    if sci {
        format!("{body}×10{}", superscript(exp10))
    } else {
        body
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_endpoints() {
        assert!((cosine_lr(0, 300, 1e-3, 1e-7) - 1e-3).abs() < 1e-12);
        assert!((cosine_lr(300, 300, 1e-3, 1e-7) - 1e-7).abs() < 1e-12);
        assert!((cosine_lr(150, 300, 1e-3, 1e-7) - (1e-3 + 1e-7) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn adam_zero_gradient_keeps_parameter() {
        let mut opt = Adam::new(&[(1, 1)], 0.9, 0.999, 1e-8);
        let mut p = Tensor::scalar(2.5);
        for _ in 0..10 {
            opt.update(&mut [&mut p], &[Tensor::scalar(0.0)], 0.1).unwrap();
        }
        assert_eq!(p.item(), 2.5);
    }

    #[test]
    fn adam_constant_gradient_moves_monotonically() {
        let mut opt = Adam::new(&[(1, 1)], 0.9, 0.999, 1e-8);
        let mut p = Tensor::scalar(0.0);
        let mut prev = 0.0;
        for _ in 0..50 {
            opt.update(&mut [&mut p], &[Tensor::scalar(0.7)], 0.01).unwrap();
            assert!(p.item() < prev);
            prev = p.item();
        }
    }

    #[test]
    fn adam_quadratic_bowl() {
        let mut opt = Adam::new(&[(1, 1)], 0.9, 0.999, 1e-8);
        let mut x = Tensor::scalar(0.0);
        for _ in 0..500 {
            let g = 2.0 * (x.item() - 3.0);
            opt.update(&mut [&mut x], &[Tensor::scalar(g)], 0.1).unwrap();
        }
        assert!((x.item() - 3.0).abs() < 1e-3, "x = {}", x.item());
    }

    #[test]
    fn parenthesis_notation() {
        assert_eq!(format_uncertainty(1.974, 0.003), "1.974(3)");
        assert_eq!(format_uncertainty(5.376e3, 9.0), "5.376(9)×10³");
        assert_eq!(format_uncertainty(1.974, 0.0), "1.974(0)");
        assert_eq!(mean_std([0.1 + 0.2; 3].into_iter()), (0.1 + 0.2, 0.0));
        assert_eq!(format_uncertainty(2.0e-4, 3.0e-6), "2.00(3)×10⁻⁴");
        assert_eq!(format_uncertainty(0.713, 0.0096), "0.71(1)");
    }

    #[test]
    fn mean_std_population() {
        let (m, s) = mean_std([1.0, 3.0].into_iter());
        assert_eq!((m, s), (2.0, 1.0));
    }
}
