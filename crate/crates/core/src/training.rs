//! Losses, optimizers, the epoch loop and evaluation metrics.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{pairwise_sum, Matrix, Rng};
use crate::setnn::{ModelSnapshot, SetBatch, SetModel, Targets};
use crate::FORMAT_VERSION;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Optimizer {
    Sgd {
        lr: f64,
    },
    Adam {
        lr: f64,
        #[serde(default = "default_beta1")]
        beta1: f64,
        #[serde(default = "default_beta2")]
        beta2: f64,
        #[serde(default = "default_eps")]
        eps: f64,
    },
}

fn default_beta1() -> f64 {
    0.9
}

fn default_beta2() -> f64 {
    0.999
}

fn default_eps() -> f64 {
    1e-8
}

impl Optimizer {
    pub fn adam(lr: f64) -> Self {
        Optimizer::Adam {
            lr,
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
        }
    }

    pub fn lr(&self) -> f64 {
        match *self {
            Optimizer::Sgd { lr } | Optimizer::Adam { lr, .. } => lr,
        }
    }
}

impl Default for Optimizer {
    fn default() -> Self {
        Optimizer::adam(1e-3)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Loss {
    #[default]
    Mse,
    CrossEntropy,
}

/// Learning-rate multiplier over epochs.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    #[default]
    Constant,
    /// `½(1 + cos(π·epoch/epochs))`, held fixed within an epoch.
    Cosine,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: Optimizer,
    pub seed: u64,
    pub loss: Loss,
    /// `[p_min, p_max]`, applied after every step when `p` is learnable.
    pub p_clamp: [f64; 2],
    pub lr_schedule: LrSchedule,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 100,
            batch_size: 32,
            optimizer: Optimizer::default(),
            seed: 0,
            loss: Loss::Mse,
            p_clamp: [-10.0, 10.0],
            lr_schedule: LrSchedule::Constant,
        }
    }
}

impl TrainConfig {
    /// Step size used throughout epoch `epoch`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let base = self.optimizer.lr();
        match self.lr_schedule {
            LrSchedule::Constant => base,
            LrSchedule::Cosine => {
                let t = epoch.min(self.epochs) as f64 / self.epochs as f64;
                0.5 * base * (1.0 + (std::f64::consts::PI * t).cos())
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::config("train.epochs must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("train.batch_size must be at least 1"));
        }
        let lr = self.optimizer.lr();
        if !(lr > 0.0) || !lr.is_finite() {
            return Err(Error::config(format!("train.optimizer.lr must be positive, got {lr}")));
        }
        if let Optimizer::Adam { beta1, beta2, eps, .. } = self.optimizer {
            if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) || !(eps > 0.0) {
                return Err(Error::config("Adam needs beta1, beta2 in [0, 1) and eps > 0"));
            }
        }
        let [lo, hi] = self.p_clamp;
        if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
            return Err(Error::config(format!("train.p_clamp needs p_min < p_max, got [{lo}, {hi}]")));
        }
        Ok(())
    }
}

fn check_shape(op: &'static str, a: &Matrix, b: &Matrix) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape {
            op,
            left: a.shape(),
            right: b.shape(),
        });
    }
    Ok(())
}

/// Mean squared error over all entries and its gradient w.r.t. `pred`.
pub fn mse_loss(pred: &Matrix, target: &Matrix) -> Result<(f64, Matrix)> {
    check_shape("mse_loss", pred, target)?;
    let n = pred.data().len() as f64;
    let diff: Vec<f64> = pred.data().iter().zip(target.data()).map(|(p, t)| p - t).collect();
    let loss = pairwise_sum(&diff.iter().map(|d| d * d).collect::<Vec<_>>()) / n;
    let grad = Matrix::new(pred.rows(), pred.cols(), diff.iter().map(|d| 2.0 * d / n).collect())?;
    Ok((loss, grad))
}

/// Mean softmax cross-entropy over rows and its gradient w.r.t. `logits`.
pub fn cross_entropy_loss(logits: &Matrix, labels: &[usize]) -> Result<(f64, Matrix)> {
    if labels.len() != logits.rows() {
        return Err(Error::Shape {
            op: "cross_entropy_loss",
            left: logits.shape(),
            right: (labels.len(), 1),
        });
    }
    let b = logits.rows() as f64;
    let mut grad = Matrix::zeros(logits.rows(), logits.cols());
    let mut per_row = Vec::with_capacity(labels.len());
    for (i, &y) in labels.iter().enumerate() {
        let row = logits.row(i);
        if y >= row.len() {
            return Err(Error::domain(format!("label {y} out of range for {} classes", row.len())));
        }
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
        let z: f64 = exps.iter().sum();
        per_row.push(z.ln() + m - row[y]);
        for (c, e) in exps.iter().enumerate() {
            let target = if c == y { 1.0 } else { 0.0 };
            grad.set(i, c, (e / z - target) / b);
        }
    }
    Ok((pairwise_sum(&per_row) / b, grad))
}

/// Adam moments; `t` counts completed steps.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub t: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        AdamState {
            t: 0,
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }
}

pub fn sgd_step(params: &mut [f64], grads: &[f64], lr: f64) -> Result<()> {
    if params.len() != grads.len() {
        return Err(Error::Shape {
            op: "sgd_step",
            left: (params.len(), 1),
            right: (grads.len(), 1),
        });
    }
    for (p, g) in params.iter_mut().zip(grads) {
        *p -= lr * g;
    }
    Ok(())
}

/// One bias-corrected Adam update.
pub fn adam_step(
    params: &mut [f64],
    grads: &[f64],
    state: &mut AdamState,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
) -> Result<()> {
    if params.len() != grads.len() || state.m.len() != params.len() || state.v.len() != params.len() {
        return Err(Error::Shape {
            op: "adam_step",
            left: (params.len(), grads.len()),
            right: (state.m.len(), state.v.len()),
        });
    }
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - beta1.powi(t);
    let c2 = 1.0 - beta2.powi(t);
    for i in 0..params.len() {
        let g = grads[i];
        state.m[i] = beta1 * state.m[i] + (1.0 - beta1) * g;
        state.v[i] = beta2 * state.v[i] + (1.0 - beta2) * g * g;
        let m_hat = state.m[i] / c1;
        let v_hat = state.v[i] / c2;
        params[i] -= lr * m_hat / (v_hat.sqrt() + eps);
    }
    Ok(())
}

/// Optimizer progress, enough to resume training exactly.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub epochs_done: usize,
    pub adam: Option<AdamState>,
}

/// Applies one optimizer step to every model parameter, then clamps `p`.
/// The step size follows `cfg.lr_schedule` at epoch `state.epochs_done`.
pub fn apply_step(model: &mut SetModel, grads: &[f64], cfg: &TrainConfig, state: &mut TrainState) -> Result<()> {
    let mut params = model.params();
    let lr = cfg.lr_at(state.epochs_done);
    match cfg.optimizer {
        Optimizer::Sgd { .. } => sgd_step(&mut params, grads, lr)?,
        Optimizer::Adam { beta1, beta2, eps, .. } => {
            let adam = state.adam.get_or_insert_with(|| AdamState::new(params.len()));
            adam_step(&mut params, grads, adam, lr, beta1, beta2, eps)?;
        }
    }
    if model.agg.is_learnable() {
        let last = params.last_mut().expect("p is the last parameter");
        *last = last.clamp(cfg.p_clamp[0], cfg.p_clamp[1]);
    }
    model.set_params(&params)
}

/// Metrics over a set collection. Regression fills `rmse`/`mae`,
/// classification fills `accuracy`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub loss: f64,
    pub rmse: Option<f64>,
    pub mae: Option<f64>,
    pub accuracy: Option<f64>,
}

fn loss_and_grad(pred: &Matrix, targets: &Targets, loss: Loss) -> Result<(f64, Matrix)> {
    match (loss, targets) {
        (Loss::Mse, Targets::Values(v)) => {
            if pred.cols() != 1 {
                return Err(Error::config(format!("mse on scalar targets needs one output, model has {}", pred.cols())));
            }
            mse_loss(pred, &Matrix::column(v))
        }
        (Loss::CrossEntropy, Targets::Labels(l)) => cross_entropy_loss(pred, l),
        (loss, _) => Err(Error::config(format!("loss {loss:?} does not match the dataset targets"))),
    }
}

fn metrics_from(pred: &Matrix, targets: &Targets, loss: Loss) -> Result<Metrics> {
    let (l, _) = loss_and_grad(pred, targets, loss)?;
    let mut m = Metrics {
        loss: l,
        ..Metrics::default()
    };
    match targets {
        Targets::Values(v) => {
            let sq: Vec<f64> = pred.data().iter().zip(v).map(|(p, t)| (p - t) * (p - t)).collect();
            let abs: Vec<f64> = pred.data().iter().zip(v).map(|(p, t)| (p - t).abs()).collect();
            let n = v.len() as f64;
            m.rmse = Some((pairwise_sum(&sq) / n).sqrt());
            m.mae = Some(pairwise_sum(&abs) / n);
        }
        Targets::Labels(l) => {
            let hits = l
                .iter()
                .enumerate()
                .filter(|&(i, &y)| argmax(pred.row(i)) == y)
                .count();
            m.accuracy = Some(hits as f64 / l.len() as f64);
        }
        Targets::None => return Err(Error::config("cannot evaluate unlabeled sets")),
    }
    Ok(m)
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Sets per chunk when evaluation fans out across threads.
const EVAL_CHUNK: usize = 256;

/// Predictions for every set, computed in parallel chunks and reassembled in
/// order.
pub fn predict_all(model: &SetModel, data: &SetBatch) -> Result<Matrix> {
    let idx: Vec<usize> = (0..data.len()).collect();
    let chunks: Vec<Matrix> = idx
        .par_chunks(EVAL_CHUNK)
        .map(|c| model.predict_batch(&data.select(c)))
        .collect::<Result<_>>()?;
    let cols = model.output_dim();
    let data: Vec<f64> = chunks.into_iter().flat_map(Matrix::into_data).collect();
    Matrix::new(data.len() / cols, cols, data)
}

pub fn evaluate(model: &SetModel, data: &SetBatch, loss: Loss) -> Result<Metrics> {
    let pred = predict_all(model, data)?;
    metrics_from(&pred, data.targets(), loss)
}

/// One row of the per-epoch log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub split: String,
    #[serde(flatten)]
    pub metrics: Metrics,
    pub p: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub format_version: u32,
    pub records: Vec<EpochRecord>,
    /// `p` after each epoch when learnable.
    pub p_trajectory: Vec<f64>,
    pub final_p: Option<f64>,
}

impl TrainReport {
    pub fn write_csv(&self, out: impl Write) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["epoch", "split", "loss", "rmse", "mae", "accuracy", "p"])?;
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for r in &self.records {
            w.write_record([
                r.epoch.to_string(),
                r.split.clone(),
                r.metrics.loss.to_string(),
                opt(r.metrics.rmse),
                opt(r.metrics.mae),
                opt(r.metrics.accuracy),
                opt(r.p),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn last(&self, split: &str) -> Option<&EpochRecord> {
        self.records.iter().rev().find(|r| r.split == split)
    }
}

/// Called after every epoch with that epoch's records.
pub type EpochObserver<'a> = dyn FnMut(&[EpochRecord]) + 'a;

/// Trains `model` for `cfg.epochs` epochs (continuing from `state` when
/// given). Epoch `e` visits the training sets in the order
/// `Rng::new(cfg.seed).fork(e).permutation(n)`, so a run is a pure function
/// of the model, data and config.
///
/// Training metrics are gathered from the pre-step predictions made during
/// the epoch; validation metrics from a full pass after it.
pub fn train(
    model: SetModel,
    train_set: &SetBatch,
    val_set: Option<&SetBatch>,
    cfg: &TrainConfig,
    state: Option<TrainState>,
) -> Result<(SetModel, TrainReport, TrainState)> {
    train_observed(model, train_set, val_set, cfg, state, &mut |_| {})
}

pub fn train_observed(
    mut model: SetModel,
    train_set: &SetBatch,
    val_set: Option<&SetBatch>,
    cfg: &TrainConfig,
    state: Option<TrainState>,
    observer: &mut EpochObserver<'_>,
) -> Result<(SetModel, TrainReport, TrainState)> {
    cfg.validate()?;
    if train_set.dim() != model.input_dim() {
        return Err(Error::config(format!(
            "data has element dimension {}, model expects {}",
            train_set.dim(),
            model.input_dim()
        )));
    }
    let mut state = state.unwrap_or_default();
    let mut report = TrainReport {
        format_version: FORMAT_VERSION,
        ..TrainReport::default()
    };
    let root = Rng::new(cfg.seed);
    let n = train_set.len();
    for epoch in state.epochs_done..cfg.epochs {
        let order = root.fork(epoch as u64).permutation(n);
        let mut preds = Matrix::zeros(n, model.output_dim());
        for (b, idx) in order.chunks(cfg.batch_size).enumerate() {
            let batch = train_set.select(idx);
            let (pred, cache) = model.forward(&batch).map_err(|e| at_step(e, epoch, b))?;
            let (loss, grad) = loss_and_grad(&pred, batch.targets(), cfg.loss)?;
            if !loss.is_finite() {
                return Err(Error::NonFinite(format!("loss (epoch {epoch}, batch {b})")));
            }
            for (k, &i) in idx.iter().enumerate() {
                preds.row_mut(i).copy_from_slice(pred.row(k));
            }
            let grads = model.backward(&batch, &cache, &grad).map_err(|e| at_step(e, epoch, b))?;
            apply_step(&mut model, &grads.flatten(), cfg, &mut state)?;
            if let Some(name) = model.first_non_finite() {
                return Err(Error::NonFinite(format!("{name} (epoch {epoch}, batch {b})")));
            }
        }
        let p = model.agg.p().filter(|_| model.agg.is_learnable());
        let mut epoch_records = vec![EpochRecord {
            epoch,
            split: "train".into(),
            metrics: metrics_from(&preds, train_set.targets(), cfg.loss)?,
            p,
        }];
        if let Some(val) = val_set {
            epoch_records.push(EpochRecord {
                epoch,
                split: "val".into(),
                metrics: evaluate(&model, val, cfg.loss).map_err(|e| at_step(e, epoch, usize::MAX))?,
                p,
            });
        }
        report.p_trajectory.extend(p);
        observer(&epoch_records);
        report.records.extend(epoch_records);
        state.epochs_done = epoch + 1;
    }
    report.final_p = model.agg.p().filter(|_| model.agg.is_learnable());
    Ok((model, report, state))
}

fn at_step(e: Error, epoch: usize, batch: usize) -> Error {
    let place = if batch == usize::MAX {
        format!("validation after epoch {epoch}")
    } else {
        format!("epoch {epoch}, batch {batch}")
    };
    match e {
        Error::NonFinite(what) => Error::NonFinite(format!("{what} ({place})")),
        Error::Domain(what) if what.contains("non-finite") => Error::NonFinite(format!("{what} ({place})")),
        other => other,
    }
}

/// Model plus optimizer state; everything needed to continue a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub model: ModelSnapshot,
    pub state: TrainState,
}

impl Checkpoint {
    pub fn new(model: &SetModel, state: &TrainState) -> Self {
        Checkpoint {
            format_version: FORMAT_VERSION,
            model: model.snapshot(),
            state: state.clone(),
        }
    }

    pub fn restore(&self) -> Result<(SetModel, TrainState)> {
        if self.format_version != FORMAT_VERSION {
            return Err(Error::Validation(format!(
                "unsupported checkpoint format_version {}",
                self.format_version
            )));
        }
        Ok((SetModel::from_snapshot(&self.model)?, self.state.clone()))
    }
}
