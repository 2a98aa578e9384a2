//! Searching the power-mean exponent `p`: exhaustive grid, Gaussian-process
//! Bayesian optimization, and joint gradient training.

use std::io::Write;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{Continuous, ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::setnn::{SetBatch, SetModel};
use crate::training::{train_observed, EpochRecord, TrainConfig};
use crate::FORMAT_VERSION;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    #[default]
    Minimize,
    Maximize,
}

impl Direction {
    /// Whether `a` is strictly better than `b`.
    pub fn better(self, a: f64, b: f64) -> bool {
        match self {
            Direction::Minimize => a < b,
            Direction::Maximize => a > b,
        }
    }

    fn sign(self) -> f64 {
        match self {
            Direction::Minimize => -1.0,
            Direction::Maximize => 1.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Strategy {
    Grid { step: f64 },
    GradientJoint,
    Bayes { trials: usize, init_points: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SearchConfig {
    pub strategy: Strategy,
    pub range: [f64; 2],
    pub direction: Direction,
    pub seed: u64,
    /// Store per-trial wall time. Off by default so results are
    /// reproducible byte for byte.
    pub record_time: bool,
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig {
            strategy: Strategy::Grid { step: 0.5 },
            range: [-10.0, 10.0],
            direction: Direction::Minimize,
            seed: 0,
            record_time: false,
        }
    }
}

impl SearchConfig {
    pub fn validate(&self) -> Result<()> {
        let [lo, hi] = self.range;
        if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
            return Err(Error::config(format!("search.range needs p_min < p_max, got [{lo}, {hi}]")));
        }
        match self.strategy {
            Strategy::Grid { step } if !(step > 0.0) || !step.is_finite() => {
                Err(Error::config(format!("search.strategy.step must be positive, got {step}")))
            }
            Strategy::Bayes { trials, init_points } if init_points < 2 || trials < init_points => Err(Error::config(
                format!("bayes search needs trials ≥ init_points ≥ 2, got {trials} and {init_points}"),
            )),
            _ => Ok(()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trial {
    pub trial: usize,
    pub p: f64,
    pub objective: f64,
    pub wall_seconds: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchResult {
    pub format_version: u32,
    pub strategy: String,
    pub best_p: f64,
    pub best_objective: f64,
    pub history: Vec<Trial>,
    /// Set when the search stopped early; `history` holds what completed.
    pub aborted: Option<String>,
}

impl SearchResult {
    /// Columns `trial,p,objective,seconds`.
    pub fn write_history_csv(&self, out: impl Write) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["trial", "p", "objective", "seconds"])?;
        for t in &self.history {
            w.write_record([
                t.trial.to_string(),
                t.p.to_string(),
                t.objective.to_string(),
                t.wall_seconds.map(|s| s.to_string()).unwrap_or_default(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

fn timed<T>(record: bool, f: impl FnOnce() -> T) -> (T, Option<f64>) {
    let start = Instant::now();
    let out = f();
    (out, record.then(|| start.elapsed().as_secs_f64()))
}

/// Index of the best objective; ties go to the earlier entry.
fn best_index(history: &[Trial], dir: Direction) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, t) in history.iter().enumerate() {
        if best.is_none_or(|b| dir.better(t.objective, history[b].objective)) {
            best = Some(i);
        }
    }
    best
}

/// `p_min, p_min + step, …` up to `p_max` (inclusive, allowing for rounding).
pub fn grid_points(range: [f64; 2], step: f64) -> Result<Vec<f64>> {
    let [lo, hi] = range;
    if !(step > 0.0) || !(lo <= hi) {
        return Err(Error::config("empty grid"));
    }
    let count = ((hi - lo) / step + 1e-9).floor() as usize + 1;
    Ok((0..count).map(|i| (lo + i as f64 * step).min(hi)).collect())
}

/// Evaluates the objective at every grid point (in parallel) and returns the
/// best; ties go to the smaller `p`.
pub fn grid_search<F>(objective: F, cfg: &SearchConfig) -> Result<SearchResult>
where
    F: Fn(f64) -> Result<f64> + Sync,
{
    cfg.validate()?;
    let Strategy::Grid { step } = cfg.strategy else {
        return Err(Error::config("grid_search needs a grid strategy"));
    };
    let points = grid_points(cfg.range, step)?;
    let history: Vec<Trial> = points
        .par_iter()
        .enumerate()
        .map(|(i, &p)| {
            let (obj, secs) = timed(cfg.record_time, || objective(p));
            Ok(Trial {
                trial: i,
                p,
                objective: finite_objective(obj?, p)?,
                wall_seconds: secs,
            })
        })
        .collect::<Result<_>>()?;
    finish("grid", history, cfg.direction, None)
}

fn finite_objective(v: f64, p: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite(format!("objective at p = {p}")))
    }
}

fn finish(strategy: &str, history: Vec<Trial>, dir: Direction, aborted: Option<String>) -> Result<SearchResult> {
    let (best_p, best_objective) = match best_index(&history, dir) {
        Some(i) => (history[i].p, history[i].objective),
        None if aborted.is_some() => (f64::NAN, f64::NAN),
        None => return Err(Error::config("search evaluated no points")),
    };
    Ok(SearchResult {
        format_version: FORMAT_VERSION,
        strategy: strategy.to_string(),
        best_p,
        best_objective,
        history,
        aborted,
    })
}

/// Length-scale of the squared-exponential kernel.
pub const GP_LENGTH_SCALE: f64 = 2.0;
/// Initial diagonal jitter; multiplied by 10 on failure up to [`GP_MAX_JITTER`].
pub const GP_JITTER: f64 = 1e-6;
pub const GP_MAX_JITTER: f64 = 1e-2;
/// Candidate points for the acquisition maximization.
pub const EI_GRID: usize = 1000;

fn se_kernel(a: f64, b: f64) -> f64 {
    let d = (a - b) / GP_LENGTH_SCALE;
    (-0.5 * d * d).exp()
}

/// Lower-triangular Cholesky factor, or `None` if `a` is not positive definite.
fn cholesky(a: &[Vec<f64>]) -> Option<Vec<Vec<f64>>> {
    let n = a.len();
    let mut l = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..=i {
            let s: f64 = (0..j).map(|k| l[i][k] * l[j][k]).sum();
            if i == j {
                let d = a[i][i] - s;
                if !(d > 0.0) {
                    return None;
                }
                l[i][i] = d.sqrt();
            } else {
                l[i][j] = (a[i][j] - s) / l[j][j];
            }
        }
    }
    Some(l)
}

fn forward_sub(l: &[Vec<f64>], b: &[f64]) -> Vec<f64> {
    let mut x = vec![0.0; b.len()];
    for i in 0..b.len() {
        let s: f64 = (0..i).map(|k| l[i][k] * x[k]).sum();
        x[i] = (b[i] - s) / l[i][i];
    }
    x
}

fn backward_sub(l: &[Vec<f64>], b: &[f64]) -> Vec<f64> {
    let n = b.len();
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let s: f64 = (i + 1..n).map(|k| l[k][i] * x[k]).sum();
        x[i] = (b[i] - s) / l[i][i];
    }
    x
}

/// Zero-mean GP posterior on standardized observations.
struct Posterior {
    xs: Vec<f64>,
    chol: Vec<Vec<f64>>,
    alpha: Vec<f64>,
}

impl Posterior {
    fn fit(xs: &[f64], ys: &[f64]) -> Result<Posterior> {
        let mut jitter = GP_JITTER;
        loop {
            let k: Vec<Vec<f64>> = xs
                .iter()
                .enumerate()
                .map(|(i, &a)| {
                    xs.iter()
                        .enumerate()
                        .map(|(j, &b)| se_kernel(a, b) + if i == j { jitter } else { 0.0 })
                        .collect()
                })
                .collect();
            if let Some(chol) = cholesky(&k) {
                let alpha = backward_sub(&chol, &forward_sub(&chol, ys));
                return Ok(Posterior {
                    xs: xs.to_vec(),
                    chol,
                    alpha,
                });
            }
            jitter *= 10.0;
            if jitter > GP_MAX_JITTER * (1.0 + 1e-12) {
                return Err(Error::Numerical(format!(
                    "GP kernel matrix is singular even with jitter {GP_MAX_JITTER}"
                )));
            }
        }
    }

    fn predict(&self, x: f64) -> (f64, f64) {
        let ks: Vec<f64> = self.xs.iter().map(|&a| se_kernel(a, x)).collect();
        let mean = ks.iter().zip(&self.alpha).map(|(k, a)| k * a).sum();
        let v = forward_sub(&self.chol, &ks);
        let var = (1.0 - v.iter().map(|t| t * t).sum::<f64>()).max(0.0);
        (mean, var.sqrt())
    }
}

/// Expected improvement over `best` (maximization) at mean `mu`, sd `sigma`.
fn expected_improvement(mu: f64, sigma: f64, best: f64) -> f64 {
    if sigma < 1e-12 {
        return (mu - best).max(0.0);
    }
    let z = (mu - best) / sigma;
    let n = Normal::standard();
    (mu - best) * n.cdf(z) + sigma * n.pdf(z)
}

/// Next point to evaluate: the EI maximizer on an evenly spaced candidate
/// grid, ties to the smallest `p`. `ys` are oriented so larger is better.
fn propose(xs: &[f64], ys: &[f64], range: [f64; 2]) -> Result<f64> {
    let n = ys.len() as f64;
    let mean = ys.iter().sum::<f64>() / n;
    let sd = (ys.iter().map(|y| (y - mean) * (y - mean)).sum::<f64>() / n).sqrt();
    let candidates = (0..EI_GRID).map(|i| range[0] + (range[1] - range[0]) * i as f64 / (EI_GRID - 1) as f64);
    if !(sd > 0.0) {
        // identical observations carry no information: EI is flat
        return Ok(range[0]);
    }
    let z: Vec<f64> = ys.iter().map(|y| (y - mean) / sd).collect();
    let best = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let gp = Posterior::fit(xs, &z)?;
    let mut arg = range[0];
    let mut top = f64::NEG_INFINITY;
    for c in candidates {
        let (mu, s) = gp.predict(c);
        let ei = expected_improvement(mu, s, best);
        if ei > top {
            top = ei;
            arg = c;
        }
    }
    Ok(arg)
}

/// `init_points` evenly spaced evaluations (endpoints included), then
/// expected-improvement proposals until `trials` evaluations are spent.
pub fn bayes_search<F>(mut objective: F, cfg: &SearchConfig) -> Result<SearchResult>
where
    F: FnMut(f64) -> Result<f64>,
{
    cfg.validate()?;
    let Strategy::Bayes { trials, init_points } = cfg.strategy else {
        return Err(Error::config("bayes_search needs a bayes strategy"));
    };
    let [lo, hi] = cfg.range;
    let mut history: Vec<Trial> = Vec::with_capacity(trials);
    for i in 0..trials {
        let p = if i < init_points {
            lo + (hi - lo) * i as f64 / (init_points - 1) as f64
        } else {
            let xs: Vec<f64> = history.iter().map(|t| t.p).collect();
            let ys: Vec<f64> = history.iter().map(|t| cfg.direction.sign() * t.objective).collect();
            propose(&xs, &ys, cfg.range)?
        };
        let (obj, secs) = timed(cfg.record_time, || objective(p));
        history.push(Trial {
            trial: i,
            p,
            objective: finite_objective(obj?, p)?,
            wall_seconds: secs,
        });
    }
    finish("bayes", history, cfg.direction, None)
}

/// Trains `model` with `p` as a parameter, clamped to `cfg.range`. History
/// holds one entry per epoch: `p` after the epoch and the validation loss
/// (training loss without a validation set). `best_p` is the final `p`.
///
/// A non-finite value during training ends the search with `aborted` set and
/// the epochs completed so far in `history`.
pub fn gradient_search(
    model: SetModel,
    train_set: &SetBatch,
    val_set: Option<&SetBatch>,
    train_cfg: &TrainConfig,
    cfg: &SearchConfig,
) -> Result<(SearchResult, Option<SetModel>)> {
    cfg.validate()?;
    if !model.agg.is_learnable() {
        return Err(Error::config("gradient search needs a learnable power-mean aggregator"));
    }
    let mut tc = train_cfg.clone();
    tc.p_clamp = cfg.range;
    let mut model = model;
    if let Some(p) = model.agg.p() {
        model.agg.set_p(p.clamp(cfg.range[0], cfg.range[1]));
    }
    let mut history = Vec::new();
    let mut last = Instant::now();
    let record_time = cfg.record_time;
    let mut observer = |records: &[EpochRecord]| {
        let r = records.iter().find(|r| r.split == "val").unwrap_or(&records[0]);
        let now = Instant::now();
        history.push(Trial {
            trial: r.epoch,
            p: r.p.unwrap_or(f64::NAN),
            objective: r.metrics.loss,
            wall_seconds: record_time.then(|| (now - last).as_secs_f64()),
        });
        last = now;
    };
    let outcome = train_observed(model, train_set, val_set, &tc, None, &mut observer);
    match outcome {
        Ok((trained, _, _)) => {
            let p = trained.agg.p().expect("learnable");
            let objective = history.last().map_or(f64::NAN, |t| t.objective);
            Ok((
                SearchResult {
                    format_version: FORMAT_VERSION,
                    strategy: "gd".into(),
                    best_p: p,
                    best_objective: objective,
                    history,
                    aborted: None,
                },
                Some(trained),
            ))
        }
        Err(Error::NonFinite(what)) => {
            let (best_p, best_objective) = history.last().map_or((f64::NAN, f64::NAN), |t| (t.p, t.objective));
            Ok((
                SearchResult {
                    format_version: FORMAT_VERSION,
                    strategy: "gd".into(),
                    best_p,
                    best_objective,
                    history,
                    aborted: Some(format!("non-finite value in {what}")),
                },
                None,
            ))
        }
        Err(e) => Err(e),
    }
}
