//! Recurrent network: stacked LSTM, batch normalization, dropout, linear
//! decoder and Softplus output, rolled out over a batch horizon.

use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{concat, Axis, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Where dropout is applied in training mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DropoutSite {
    /// On the normalized features feeding the decoder.
    #[default]
    Decoder,
    /// On the hidden output of every LSTM layer except the last.
    BetweenLayers,
}

/// What the network receives as its state input at each step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Feedback {
    /// Its own previous prediction.
    Autoregressive,
    /// The initial state at every step.
    #[default]
    Initial,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub input_dim: usize,
    pub output_dim: usize,
    pub hidden: usize,
    pub layers: usize,
    pub dropout: f64,
    pub dropout_site: DropoutSite,
    pub batchnorm: bool,
    pub bn_momentum: f64,
    pub bn_eps: f64,
    pub feedback: Feedback,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            input_dim: 6,
            output_dim: 5,
            hidden: 64,
            layers: 2,
            dropout: 0.2,
            dropout_site: DropoutSite::Decoder,
            batchnorm: true,
            bn_momentum: 0.1,
            bn_eps: 1e-5,
            feedback: Feedback::Initial,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim != self.output_dim + 1 {
            return Err(Error::Config(format!(
                "input_dim must be output_dim + 1 (states plus temperature), got {} and {}",
                self.input_dim, self.output_dim
            )));
        }
        if self.hidden == 0 || self.layers == 0 {
            return Err(Error::Config("hidden size and layer count must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if !(self.bn_momentum > 0.0 && self.bn_momentum <= 1.0 && self.bn_eps > 0.0) {
            return Err(Error::Config("invalid batchnorm momentum or epsilon".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Weights of one LSTM layer in row-vector convention:
/// `gates = x W_ih + h W_hh + b`, gate blocks ordered i, f, g, o.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LstmLayer {
    pub w_ih: Tensor,
    pub w_hh: Tensor,
    pub bias: Tensor,
}

impl LstmLayer {
    fn init(input: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        let uniform = |rows: usize, cols: usize, bound: f64, rng: &mut dyn rand::RngCore| {
            let data = (0..rows * cols)
                .map(|_| rng.random_range(-bound..=bound))
                .collect();
            Tensor::new(rows, cols, data).expect("consistent shape")
        };
        let w_ih = uniform(input, 4 * hidden, 1.0 / (input as f64).sqrt(), rng);
        let w_hh = uniform(hidden, 4 * hidden, 1.0 / (hidden as f64).sqrt(), rng);
        let mut bias = uniform(1, 4 * hidden, 1.0 / (hidden as f64).sqrt(), rng);
        for j in hidden..2 * hidden {
            bias.set(0, j, 1.0);
        }
        Self { w_ih, w_hh, bias }
    }

    pub fn hidden(&self) -> usize {
        self.w_hh.rows()
    }
}

/// All learnable and running state of the network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Network {
    pub config: ModelConfig,
    pub layers: Vec<LstmLayer>,
    pub bn_gamma: Tensor,
    pub bn_beta: Tensor,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub dec_w: Tensor,
    pub dec_b: Tensor,
}

/// Per-layer weights recorded on a tape.
#[derive(Clone)]
pub struct BoundLayer {
    pub w_ih: Var,
    pub w_hh: Var,
    pub bias: Var,
}

/// Network weights recorded on a tape as leaves.
#[derive(Clone)]
pub struct BoundNetwork {
    pub tape: Rc<Tape>,
    pub layers: Vec<BoundLayer>,
    pub bn_gamma: Var,
    pub bn_beta: Var,
    pub dec_w: Var,
    pub dec_b: Var,
}

impl BoundNetwork {
    /// Leaves in the same order as [`Network::params_mut`].
    pub fn params(&self) -> Vec<&Var> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.extend([&l.w_ih, &l.w_hh, &l.bias]);
        }
        out.extend([&self.bn_gamma, &self.bn_beta, &self.dec_w, &self.dec_b]);
        out
    }
}

/// Result of a rollout.
pub struct Rollout {
    /// Predicted normalized trajectory, N x 5; row 0 equals x0.
    pub trajectory: Var,
    /// Sequence statistics of the pre-normalization features when batch
    /// normalization ran in training mode.
    pub batch_stats: Option<(Vec<f64>, Vec<f64>)>,
}

impl Network {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let h = config.hidden;
        let layers = (0..config.layers)
            .map(|l| LstmLayer::init(if l == 0 { config.input_dim } else { h }, h, &mut rng))
            .collect();
        let bound = 1.0 / (h as f64).sqrt();
        let dec_w = Tensor::new(
            h,
            config.output_dim,
            (0..h * config.output_dim)
                .map(|_| rng.random_range(-bound..=bound))
                .collect(),
        )?;
        let dec_b = Tensor::row(
            (0..config.output_dim)
                .map(|_| rng.random_range(-bound..=bound))
                .collect(),
        );
        Ok(Self {
            config,
            layers,
            bn_gamma: Tensor::full(1, h, 1.0),
            bn_beta: Tensor::zeros(1, h),
            running_mean: vec![0.0; h],
            running_var: vec![1.0; h],
            dec_w,
            dec_b,
        })
    }

    /// Learnable tensors in a fixed order.
    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for l in &mut self.layers {
            out.push(&mut l.w_ih);
            out.push(&mut l.w_hh);
            out.push(&mut l.bias);
        }
        out.push(&mut self.bn_gamma);
        out.push(&mut self.bn_beta);
        out.push(&mut self.dec_w);
        out.push(&mut self.dec_b);
        out
    }

    pub fn param_names(&self) -> Vec<String> {
        let mut out = Vec::new();
        for l in 0..self.layers.len() {
            for n in ["w_ih", "w_hh", "bias"] {
                out.push(format!("lstm{l}.{n}"));
            }
        }
        out.extend(["bn.gamma", "bn.beta", "decoder.w", "decoder.b"].map(String::from));
        out
    }

    pub fn param_count(&self) -> usize {
        let mut n: usize = self
            .layers
            .iter()
            .map(|l| l.w_ih.len() + l.w_hh.len() + l.bias.len())
            .sum();
        n += self.bn_gamma.len() + self.bn_beta.len() + self.dec_w.len() + self.dec_b.len();
        n
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.w_ih.is_finite() && l.w_hh.is_finite() && l.bias.is_finite())
            && self.bn_gamma.is_finite()
            && self.bn_beta.is_finite()
            && self.dec_w.is_finite()
            && self.dec_b.is_finite()
            && self.running_mean.iter().chain(&self.running_var).all(|v| v.is_finite())
    }

    /// Records every learnable tensor on `tape` as a trainable leaf.
    pub fn bind(&self, tape: &Rc<Tape>) -> BoundNetwork {
        BoundNetwork {
            tape: Rc::clone(tape),
            layers: self
                .layers
                .iter()
                .map(|l| BoundLayer {
                    w_ih: tape.param(l.w_ih.clone()),
                    w_hh: tape.param(l.w_hh.clone()),
                    bias: tape.param(l.bias.clone()),
                })
                .collect(),
            bn_gamma: tape.param(self.bn_gamma.clone()),
            bn_beta: tape.param(self.bn_beta.clone()),
            dec_w: tape.param(self.dec_w.clone()),
            dec_b: tape.param(self.dec_b.clone()),
        }
    }

    /// Like [`bind`](Self::bind) but as constants, for inference.
    pub fn bind_frozen(&self, tape: &Rc<Tape>) -> BoundNetwork {
        BoundNetwork {
            tape: Rc::clone(tape),
            layers: self
                .layers
                .iter()
                .map(|l| BoundLayer {
                    w_ih: tape.constant(l.w_ih.clone()),
                    w_hh: tape.constant(l.w_hh.clone()),
                    bias: tape.constant(l.bias.clone()),
                })
                .collect(),
            bn_gamma: tape.constant(self.bn_gamma.clone()),
            bn_beta: tape.constant(self.bn_beta.clone()),
            dec_w: tape.constant(self.dec_w.clone()),
            dec_b: tape.constant(self.dec_b.clone()),
        }
    }

    /// Folds sequence statistics from a training rollout into the running
    /// estimates.
    pub fn update_running_stats(&mut self, stats: &(Vec<f64>, Vec<f64>)) {
        let m = self.config.bn_momentum;
        for j in 0..self.running_mean.len() {
            self.running_mean[j] = (1.0 - m) * self.running_mean[j] + m * stats.0[j];
            self.running_var[j] = (1.0 - m) * self.running_var[j] + m * stats.1[j];
        }
    }

    /// Eval-mode prediction as plain numbers, N x 5.
    pub fn predict(&self, x0: &[f64; 5], temps: &[f64]) -> Result<Vec<[f64; 5]>> {
        let tape = Tape::new();
        let bound = self.bind_frozen(&tape);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = self.rollout(&bound, x0, temps, Mode::Eval, &mut rng)?;
        let t = out.trajectory.value();
        Ok((0..t.rows())
            .map(|r| {
                let row = t.row_slice(r);
                [row[0], row[1], row[2], row[3], row[4]]
            })
            .collect())
    }

    /// Rolls the network over the normalized temperature series `temps`
    /// starting from the normalized initial state `x0`.
    pub fn rollout(
        &self,
        w: &BoundNetwork,
        x0: &[f64; 5],
        temps: &[f64],
        mode: Mode,
        rng: &mut impl Rng,
    ) -> Result<Rollout> {
        let n = temps.len();
        if n < 3 {
            return Err(Error::Contract(format!("rollout needs at least 3 steps, got {n}")));
        }
        let tape = &w.tape;
        let h = self.config.hidden;
        let x0_row = tape.constant(Tensor::row(x0.to_vec()));
        let zeros = tape.constant(Tensor::zeros(1, h));
        let mut hs: Vec<Var> = vec![zeros.clone(); self.layers.len()];
        let mut cs: Vec<Var> = vec![zeros; self.layers.len()];

        match self.config.feedback {
            Feedback::Initial => {
                let mut tops = Vec::with_capacity(n - 1);
                for (k, &temp) in temps.iter().enumerate().skip(1) {
                    let t = tape.constant(Tensor::scalar(temp));
                    let input = concat(&[x0_row.clone(), t], Axis::Cols);
                    let top = self.step_layers(w, &input, &mut hs, &mut cs, mode, rng);
                    check_finite(&top, k)?;
                    tops.push(top);
                }
                let features = concat(&tops, Axis::Rows);
                let (normed, stats) = self.batchnorm(w, &features, mode)?;
                let dropped = self.decoder_dropout(&normed, mode, rng);
                let bias = repeat_rows(&w.dec_b, n - 1);
                let out = (&dropped.matmul(&w.dec_w) + &bias).softplus();
                check_finite(&out, n - 1)?;
                Ok(Rollout {
                    trajectory: concat(&[x0_row, out], Axis::Rows),
                    batch_stats: stats,
                })
            }
            Feedback::Autoregressive => {
                let mut rows = Vec::with_capacity(n);
                rows.push(x0_row);
                let mut tops = Vec::with_capacity(n - 1);
                for (k, &temp) in temps.iter().enumerate().skip(1) {
                    let t = tape.constant(Tensor::scalar(temp));
                    let input = concat(&[rows[k - 1].clone(), t], Axis::Cols);
                    let top = self.step_layers(w, &input, &mut hs, &mut cs, mode, rng);
                    let normed = self.batchnorm_running(w, &top);
                    let dropped = self.decoder_dropout(&normed, mode, rng);
                    let out = (&dropped.matmul(&w.dec_w) + &w.dec_b).softplus();
                    check_finite(&out, k)?;
                    if self.config.batchnorm && mode == Mode::Train {
                        tops.push(top.value());
                    }
                    rows.push(out);
                }
                let stats = (!tops.is_empty()).then(|| sequence_stats(&tops));
                Ok(Rollout {
                    trajectory: concat(&rows, Axis::Rows),
                    batch_stats: stats,
                })
            }
        }
    }

    fn step_layers(
        &self,
        w: &BoundNetwork,
        input: &Var,
        hs: &mut [Var],
        cs: &mut [Var],
        mode: Mode,
        rng: &mut impl Rng,
    ) -> Var {
        let mut x = input.clone();
        let last = w.layers.len() - 1;
        for (l, layer) in w.layers.iter().enumerate() {
            let (h, c) = lstm_cell(&x, &hs[l], &cs[l], layer);
            hs[l] = h.clone();
            cs[l] = c;
            x = if l < last && self.config.dropout_site == DropoutSite::BetweenLayers {
                self.dropout(&h, mode, rng)
            } else {
                h
            };
        }
        x
    }

    fn decoder_dropout(&self, x: &Var, mode: Mode, rng: &mut impl Rng) -> Var {
        match self.config.dropout_site {
            DropoutSite::Decoder => self.dropout(x, mode, rng),
            DropoutSite::BetweenLayers => x.clone(),
        }
    }

    /// Normalization with running statistics (used inside autoregressive
    /// rollouts and in evaluation).
    fn batchnorm_running(&self, w: &BoundNetwork, x: &Var) -> Var {
        if !self.config.batchnorm {
            return x.clone();
        }
        let tape = &w.tape;
        let mean = tape.constant(Tensor::row(self.running_mean.clone()));
        let inv_std = tape.constant(Tensor::row(
            self.running_var
                .iter()
                .map(|v| 1.0 / (v + self.config.bn_eps).sqrt())
                .collect(),
        ));
        let rows = x.shape().0;
        let (mean, inv_std) = if rows == 1 {
            (mean, inv_std)
        } else {
            let rep = |v: &Var| concat(&vec![v.clone(); rows], Axis::Rows);
            (rep(&mean), rep(&inv_std))
        };
        let gamma = repeat_rows(&w.bn_gamma, rows);
        let beta = repeat_rows(&w.bn_beta, rows);
        &(&(&(x - &mean) * &inv_std) * &gamma) + &beta
    }

    /// Sequence-level batch normalization over the rows of `x`.
    #[allow(clippy::type_complexity)]
    fn batchnorm(
        &self,
        w: &BoundNetwork,
        x: &Var,
        mode: Mode,
    ) -> Result<(Var, Option<(Vec<f64>, Vec<f64>)>)> {
        if !self.config.batchnorm {
            return Ok((x.clone(), None));
        }
        if mode == Mode::Eval {
            return Ok((self.batchnorm_running(w, x), None));
        }
        let (rows, cols) = x.shape();
        let ones = w.tape.constant(Tensor::full(1, rows, 1.0 / rows as f64));
        let mean = ones.matmul(x);
        let centered = x - &repeat_rows(&mean, rows);
        let var = ones.matmul(&centered.square());
        let inv_std = var.offset(self.config.bn_eps).powf(-0.5);
        let normed = &centered * &repeat_rows(&inv_std, rows);
        let out = &(&normed * &repeat_rows(&w.bn_gamma, rows)) + &repeat_rows(&w.bn_beta, rows);
        // Running variance tracks the unbiased estimate.
        let correction = if rows > 1 { rows as f64 / (rows - 1) as f64 } else { 1.0 };
        let stats = (
            mean.value().into_data(),
            var.value().into_data().into_iter().map(|v| v * correction).collect(),
        );
        debug_assert_eq!(stats.0.len(), cols);
        Ok((out, Some(stats)))
    }

    fn dropout(&self, x: &Var, mode: Mode, rng: &mut impl Rng) -> Var {
        let p = self.config.dropout;
        if mode == Mode::Eval || p == 0.0 {
            return x.clone();
        }
        let (r, c) = x.shape();
        let keep = 1.0 / (1.0 - p);
        let mask: Vec<f64> = (0..r * c)
            .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
            .collect();
        let mask = x.tape().constant(Tensor::new(r, c, mask).expect("consistent shape"));
        x * &mask
    }
}

fn repeat_rows(v: &Var, rows: usize) -> Var {
    if rows == 1 {
        v.clone()
    } else {
        let ones = v.tape().constant(Tensor::full(rows, 1, 1.0));
        ones.matmul(v)
    }
}

fn sequence_stats(rows: &[Tensor]) -> (Vec<f64>, Vec<f64>) {
    let n = rows.len() as f64;
    let cols = rows[0].cols();
    let mut mean = vec![0.0; cols];
    for r in rows {
        for (m, v) in mean.iter_mut().zip(r.data()) {
            *m += v / n;
        }
    }
    let mut var = vec![0.0; cols];
    for r in rows {
        for ((s, v), m) in var.iter_mut().zip(r.data()).zip(&mean) {
            *s += (v - m).powi(2);
        }
    }
    let denom = if rows.len() > 1 { n - 1.0 } else { 1.0 };
    (mean, var.into_iter().map(|s| s / denom).collect())
}

fn check_finite(v: &Var, step: usize) -> Result<()> {
    if v.with_value(|t| t.is_finite()) {
        Ok(())
    } else {
        Err(Error::Numeric(format!("non-finite network output at step {step}")))
    }
}

/// One LSTM step: `c' = f*c + i*g`, `h' = o*tanh(c')`.
pub fn lstm_cell(x: &Var, h_prev: &Var, c_prev: &Var, w: &BoundLayer) -> (Var, Var) {
    let hidden = w.w_hh.shape().0;
    let gates = &(&x.matmul(&w.w_ih) + &h_prev.matmul(&w.w_hh)) + &w.bias;
    let i = gates.cols(0, hidden).sigmoid();
    let f = gates.cols(hidden, 2 * hidden).sigmoid();
    let g = gates.cols(2 * hidden, 3 * hidden).tanh();
    let o = gates.cols(3 * hidden, 4 * hidden).sigmoid();
    let c = &(&f * c_prev) + &(&i * &g);
    let h = &o * &c.tanh();
    (h, c)
}
