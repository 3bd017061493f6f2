//! Gaussian negative-log-likelihood training of one network: gridpoint
//! standardization, a random validation split, Adam and early stopping with
//! best-checkpoint restore.

use std::fmt::Write as _;

use ndarray::{Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::{GridField, PeriodSpec};
use crate::error::{Error, Result};
use crate::model::{forward, forward_on_tape, init_params, DeepEsdConfig, ModelParams, Prediction};
use crate::rng::{stream_rng, stream_seed};
use crate::tensor::{Tape, Tensor};

/// Mean over all entries of `½ln(2πσ²) + (y − μ)²/(2σ²)`.
pub fn gaussian_nll(mu: ArrayView2<f64>, sigma2: ArrayView2<f64>, y: ArrayView2<f64>) -> Result<f64> {
    if mu.dim() != sigma2.dim() || mu.dim() != y.dim() {
        return Err(Error::shape(
            "gaussian_nll",
            format!("mu {:?}, sigma2 {:?}, y {:?}", mu.dim(), sigma2.dim(), y.dim()),
        ));
    }
    if mu.is_empty() {
        return Err(Error::Empty("gaussian_nll of no samples".into()));
    }
    if let Some(s) = sigma2.iter().find(|&&s| !(s > 0.0)) {
        return Err(Error::OutOfRange(format!("sigma2 must be positive, got {s}")));
    }
    let half_ln_2pi = 0.5 * (2.0 * std::f64::consts::PI).ln();
    let total: f64 = ndarray::Zip::from(mu)
        .and(sigma2)
        .and(y)
        .fold(0.0, |acc, &m, &s, &t| acc + half_ln_2pi + 0.5 * s.ln() + (t - m) * (t - m) / (2.0 * s));
    Ok(total / mu.len() as f64)
}

/// Per-(channel, lat, lon) mean and population standard deviation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StandardizationStats {
    /// `[C, H, W]`.
    pub shape: [usize; 3],
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub computed_over: PeriodSpec,
    /// Gridpoints whose std was zero and replaced by 1.
    pub constant_points: usize,
}

/// Fits standardization statistics over the time steps of `x` inside `period`.
pub fn fit_standardizer(x: &GridField, period: &PeriodSpec) -> Result<StandardizationStats> {
    let sel = x.select_period(period)?;
    let (t, c, h, w) = sel.values().dim();
    if t == 0 {
        return Err(Error::Empty(format!("no time steps in {period}")));
    }
    let flat = sel
        .values()
        .view()
        .into_shape_with_order((t, c * h * w))
        .expect("standard layout");
    let mean: Vec<f64> = flat.mean_axis(Axis(0)).expect("t > 0").to_vec();
    let mut var = vec![0.0; c * h * w];
    for row in flat.rows() {
        for ((v, &x), &m) in var.iter_mut().zip(row).zip(&mean) {
            *v += (x - m) * (x - m);
        }
    }
    let mut constant_points = 0;
    let std = var
        .iter()
        .zip(&mean)
        .map(|(&v, &m)| {
            let s = (v / t as f64).sqrt();
            if s <= 1e-12 * (1.0 + m.abs()) {
                constant_points += 1;
                1.0
            } else {
                s
            }
        })
        .collect();
    if constant_points > 0 {
        log::warn!("{constant_points} constant predictor gridpoints; their std is set to 1");
    }
    Ok(StandardizationStats {
        shape: [c, h, w],
        mean,
        std,
        computed_over: *period,
        constant_points,
    })
}

impl StandardizationStats {
    fn check(&self, x: &GridField) -> Result<()> {
        let (_, c, h, w) = x.values().dim();
        if [c, h, w] != self.shape {
            return Err(Error::shape(
                "standardize",
                format!("field is {:?} per step but statistics are {:?}", [c, h, w], self.shape),
            ));
        }
        Ok(())
    }

    fn map(&self, x: &GridField, f: impl Fn(f64, f64, f64) -> f64) -> Result<GridField> {
        self.check(x)?;
        let mut values = x.values().clone();
        let per_step = self.mean.len();
        for step in values
            .as_slice_mut()
            .expect("standard layout")
            .chunks_exact_mut(per_step)
        {
            for ((v, &m), &s) in step.iter_mut().zip(&self.mean).zip(&self.std) {
                *v = f(*v, m, s);
            }
        }
        x.with_values(values)
    }

    /// `(x − mean) / std`.
    pub fn apply(&self, x: &GridField) -> Result<GridField> {
        self.map(x, |v, m, s| (v - m) / s)
    }

    /// `x · std + mean`.
    pub fn invert(&self, x: &GridField) -> Result<GridField> {
        self.map(x, |v, m, s| v * s + m)
    }
}

pub fn apply_standardizer(x: &GridField, stats: &StandardizationStats) -> Result<GridField> {
    stats.apply(x)
}

/// Random split without replacement; `|val| = round(val_fraction · n)`.
/// Both index lists come back sorted.
pub fn split_train_val(n_samples: usize, val_fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if n_samples < 10 {
        return Err(Error::OutOfRange(format!(
            "need at least 10 samples to split, got {n_samples}"
        )));
    }
    if !(val_fraction > 0.0 && val_fraction < 1.0) {
        return Err(Error::InvalidConfig(format!("val_fraction {val_fraction} not in (0, 1)")));
    }
    let n_val = ((val_fraction * n_samples as f64).round() as usize).clamp(1, n_samples - 1);
    let mut idx: Vec<usize> = (0..n_samples).collect();
    idx.shuffle(&mut stream_rng(seed, "split"));
    let mut val = idx[..n_val].to_vec();
    let mut train = idx[n_val..].to_vec();
    val.sort_unstable();
    train.sort_unstable();
    Ok((train, val))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub val_fraction: f64,
    pub seed: u64,
    /// Start the output biases at the training climatology (per-gridpoint
    /// mean and standard deviation of `y`) instead of zero. The predictand is
    /// kept in physical units, so without this the first epochs are spent
    /// walking the biases out to the climatological mean.
    pub warm_start_head: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-4,
            batch_size: 64,
            max_epochs: 500,
            patience: 30,
            val_fraction: 0.10,
            seed: 0,
            warm_start_head: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning rate must be positive, got {}", self.learning_rate));
        }
        if self.batch_size == 0 || self.max_epochs == 0 {
            return bad("batch size and epoch budget must be positive".into());
        }
        if self.patience >= self.max_epochs {
            return bad(format!(
                "patience {} must be below max_epochs {}",
                self.patience, self.max_epochs
            ));
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return bad(format!("val_fraction {} not in (0, 1)", self.val_fraction));
        }
        Ok(())
    }
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    step: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(learning_rate: f64, sizes: impl IntoIterator<Item = usize>) -> Self {
        let (m, v) = sizes.into_iter().map(|n| (vec![0.0; n], vec![0.0; n])).unzip();
        Adam {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step: 0,
            m,
            v,
        }
    }

    pub fn step(&mut self, params: &mut [Tensor], grads: &[&[f64]]) {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.learning_rate, self.epsilon);
        for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            for (((w, &g), m), v) in p
                .data_mut()
                .iter_mut()
                .zip(g.iter())
                .zip(self.m[k].iter_mut())
                .zip(self.v[k].iter_mut())
            {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *w -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_nll: f64,
    pub val_nll: f64,
    pub is_best: bool,
}

#[derive(Clone, Debug)]
pub struct TrainedModel {
    pub params: ModelParams,
    pub stats: StandardizationStats,
    /// Epoch 0 holds the losses of the initial parameters.
    pub history: Vec<EpochRecord>,
    pub stopped_epoch: usize,
    pub best_epoch: usize,
}

impl TrainedModel {
    pub fn best_val_nll(&self) -> f64 {
        self.history[self.best_epoch].val_nll
    }

    /// Standardizes raw predictors `x` with the training statistics and runs the network.
    pub fn predict(&self, x: &GridField) -> Result<Prediction> {
        predict_with(&self.params, &self.stats, x)
    }
}

pub fn predict_with(params: &ModelParams, stats: &StandardizationStats, x: &GridField) -> Result<Prediction> {
    let xs = stats.apply(x)?;
    forward(params, &field_tensor(&xs)?)
}

fn field_tensor(x: &GridField) -> Result<Tensor> {
    let shape = x.values().shape().to_vec();
    Tensor::new(shape, x.values().as_slice().expect("standard layout").to_vec())
}

/// CSV with header `epoch,train_nll,val_nll,is_best`.
pub fn history_csv(history: &[EpochRecord]) -> String {
    let mut out = String::from("epoch,train_nll,val_nll,is_best\n");
    for r in history {
        writeln!(out, "{},{},{},{}", r.epoch, r.train_nll, r.val_nll, r.is_best).expect("string write");
    }
    out
}

pub fn parse_history_csv(text: &str) -> Result<Vec<EpochRecord>> {
    let corrupt = |d: String| Error::Corrupt { kind: "history", detail: d };
    let mut lines = text.lines();
    if lines.next() != Some("epoch,train_nll,val_nll,is_best") {
        return Err(corrupt("missing header".into()));
    }
    lines
        .map(|line| {
            let f: Vec<&str> = line.split(',').collect();
            let [e, t, v, b] = f[..] else {
                return Err(corrupt(format!("bad row '{line}'")));
            };
            let bad = |_| corrupt(format!("bad row '{line}'"));
            Ok(EpochRecord {
                epoch: e.parse().map_err(|_| corrupt(format!("bad row '{line}'")))?,
                train_nll: t.parse().map_err(bad)?,
                val_nll: v.parse().map_err(bad)?,
                is_best: b.parse().map_err(|_| corrupt(format!("bad row '{line}'")))?,
            })
        })
        .collect()
}

/// Gathers rows of a `[T, ...]` tensor-shaped buffer.
fn gather(data: &[f64], per_row: usize, rows: &[usize]) -> Vec<f64> {
    let mut out = Vec::with_capacity(rows.len() * per_row);
    for &r in rows {
        out.extend_from_slice(&data[r * per_row..(r + 1) * per_row]);
    }
    out
}

/// Shuffled minibatches of `train_idx` for `epoch`.
pub fn epoch_batches(train_idx: &[usize], batch_size: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let mut order = train_idx.to_vec();
    order.shuffle(&mut stream_rng(seed, &format!("shuffle/{epoch}")));
    order.chunks(batch_size).map(<[usize]>::to_vec).collect()
}

fn check_pair(x: &GridField, y: &GridField, config: &DeepEsdConfig) -> Result<()> {
    if x.time() != y.time() {
        return Err(Error::shape(
            "train",
            "predictors and predictand are not time-aligned (use align_time)",
        ));
    }
    if y.n_channels() != 1 {
        return Err(Error::shape("train", format!("predictand has {} channels, expected 1", y.n_channels())));
    }
    let (_, c, h, w) = x.values().dim();
    if (c, h, w) != (config.input_channels, config.coarse_height, config.coarse_width)
        || y.n_points() != config.n_output_gridpoints
    {
        return Err(Error::ConfigMismatch(format!(
            "data is {c}x{h}x{w} -> {} points, model expects {}x{}x{} -> {}",
            y.n_points(),
            config.input_channels,
            config.coarse_height,
            config.coarse_width,
            config.n_output_gridpoints
        )));
    }
    Ok(())
}

/// Inverse of `softplus` for positive `v`.
fn softplus_inverse(v: f64) -> f64 {
    v + (-(-v).exp_m1()).ln()
}

/// Sets the output-layer biases so the network starts out predicting each
/// gridpoint's mean and standard deviation over the rows `idx` of `y`.
fn warm_start_head(params: &mut ModelParams, y: &Array2<f64>, idx: &[usize]) {
    let g = y.ncols();
    let floor = params.config.sigma_floor;
    let rows = y.select(Axis(0), idx);
    let mean = rows.mean_axis(Axis(0)).expect("nonempty split");
    let std = rows.std_axis(Axis(0), 0.0);
    let bias = params.tensors.last_mut().expect("dense bias").data_mut();
    for p in 0..g {
        bias[p] = mean[p];
        bias[g + p] = softplus_inverse((std[p] - floor).max(floor));
    }
}

/// Mean NLL of `params` on the rows `idx` (no gradients).
fn evaluate_nll(params: &ModelParams, x: &[f64], x_shape: &[usize], y: &Array2<f64>, idx: &[usize]) -> Result<f64> {
    let per_row: usize = x_shape[1..].iter().product();
    let mut shape = x_shape.to_vec();
    shape[0] = idx.len();
    let pred = forward(params, &Tensor::new(shape, gather(x, per_row, idx))?)?;
    let target = y.select(Axis(0), idx);
    gaussian_nll(pred.mu.view(), pred.sigma2.view(), target.view())
}

/// Trains one network on already period-selected, time-aligned `x` and `y`.
/// Standardization statistics are fitted on all of `x`.
pub fn train(x: &GridField, y: &GridField, model_config: &DeepEsdConfig, config: &TrainConfig) -> Result<TrainedModel> {
    config.validate()?;
    model_config.validate()?;
    check_pair(x, y, model_config)?;
    let (first, last) = x.year_range();
    let stats = fit_standardizer(x, &PeriodSpec::new(first, last)?)?;
    let xs = stats.apply(x)?;
    let x_shape = xs.values().shape().to_vec();
    let x_data = xs.values().as_slice().expect("standard layout");
    let per_row: usize = x_shape[1..].iter().product();
    let y_mat = y.channel_matrix(0)?;
    let y_data = y_mat.as_slice().expect("standard layout");
    let g = model_config.n_output_gridpoints;

    let (train_idx, val_idx) = split_train_val(x.n_time(), config.val_fraction, config.seed)?;
    let mut params = init_params(model_config, stream_seed(config.seed, "init"))?;
    if config.warm_start_head {
        warm_start_head(&mut params, &y_mat, &train_idx);
    }
    let mut adam = Adam::new(config.learning_rate, params.tensors.iter().map(Tensor::numel));

    let initial = |idx: &[usize]| match evaluate_nll(&params, x_data, &x_shape, &y_mat, idx) {
        Err(Error::NonFinite { .. }) => Err(Error::Divergence { epoch: 0, batch: usize::MAX, loss: f64::NAN }),
        other => other,
    };
    let mut history = vec![EpochRecord {
        epoch: 0,
        train_nll: initial(&train_idx)?,
        val_nll: initial(&val_idx)?,
        is_best: false,
    }];
    let mut best = (0, history[0].val_nll, params.clone());
    let mut stopped_epoch = 0;

    for epoch in 1..=config.max_epochs {
        let mut loss_sum = 0.0;
        for (b, batch) in epoch_batches(&train_idx, config.batch_size, config.seed, epoch)
            .iter()
            .enumerate()
        {
            let diverged = |loss: f64| Error::Divergence { epoch, batch: b, loss };
            let mut shape = x_shape.clone();
            shape[0] = batch.len();
            let mut tape = Tape::new();
            let vars = params.to_tape(&mut tape, true);
            let xv = tape.leaf(Tensor::new(shape, gather(x_data, per_row, batch))?);
            let step = forward_on_tape(model_config, &mut tape, &vars, xv)
                .and_then(|(mu, s2)| tape.gaussian_nll(mu, s2, &gather(y_data, g, batch)));
            let loss = match step {
                Ok(loss) => loss,
                Err(Error::NonFinite { .. }) => return Err(diverged(f64::NAN)),
                Err(e) => return Err(e),
            };
            let mut grads = tape.backward(loss)?;
            let value = grads.loss();
            if !value.is_finite() {
                return Err(diverged(value));
            }
            loss_sum += value * batch.len() as f64;
            let grad_tensors: Vec<Tensor> = vars
                .iter()
                .map(|&v| grads.take(v).ok_or(Error::DetachedGraph))
                .collect::<Result<_>>()?;
            if grad_tensors.iter().any(|t| !t.is_finite()) {
                return Err(diverged(value));
            }
            let slices: Vec<&[f64]> = grad_tensors.iter().map(Tensor::data).collect();
            adam.step(&mut params.tensors, &slices);
        }
        let val_nll = evaluate_nll(&params, x_data, &x_shape, &y_mat, &val_idx)
            .map_err(|_| Error::Divergence { epoch, batch: usize::MAX, loss: f64::NAN })?;
        if !val_nll.is_finite() {
            return Err(Error::Divergence { epoch, batch: usize::MAX, loss: val_nll });
        }
        history.push(EpochRecord {
            epoch,
            train_nll: loss_sum / train_idx.len() as f64,
            val_nll,
            is_best: false,
        });
        stopped_epoch = epoch;
        if val_nll < best.1 {
            best = (epoch, val_nll, params.clone());
        } else if epoch - best.0 >= config.patience {
            break;
        }
    }
    let (best_epoch, _, best_params) = best;
    history[best_epoch].is_best = true;
    Ok(TrainedModel {
        params: best_params,
        stats,
        history,
        stopped_epoch,
        best_epoch,
    })
}
