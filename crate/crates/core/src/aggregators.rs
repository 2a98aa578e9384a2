//! Permutation-invariant pooling over the rows of an embedding matrix.
//!
//! Every operator reduces each column (latent dimension) independently over
//! the valid rows. The power mean
//!
//! ```text
//! M_p(x) = ((1/n) Σ xᵢ^p)^(1/p)
//! ```
//!
//! is evaluated in log space as `(1/p)·(logsumexp(p·ln xᵢ) − ln n)`, which
//! stays finite for any finite `p` on positive inputs. Near `p = 0` the
//! expression is replaced by its cumulant expansion around the geometric mean
//! (`ln M_p ≈ κ₁ + κ₂·p/2 + κ₃·p²/6` with κ the cumulants of `ln x`), so the
//! value equals the geometric mean at `p = 0` exactly and the derivative in
//! `p` is continuous across the switch.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{logsumexp, Matrix};

/// Below this `|p|` the power mean uses the geometric-limit expansion.
pub const GEOMETRIC_BRANCH_EPS: f64 = 1e-4;

/// Allowed deviation of weights from the probability simplex.
pub const SIMPLEX_TOL: f64 = 1e-9;

/// Strictly monotone map `g` used by quasi-arithmetic means.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "map", rename_all = "snake_case")]
pub enum MonotoneMap {
    Identity,
    Ln,
    Exp,
    Power { q: f64 },
}

impl MonotoneMap {
    pub fn validate(&self) -> Result<()> {
        match *self {
            MonotoneMap::Power { q } if q == 0.0 || !q.is_finite() => Err(Error::config(format!(
                "power map exponent must be finite and nonzero, got {q}"
            ))),
            _ => Ok(()),
        }
    }

    /// Whether `x` lies in the domain of `g`.
    pub fn in_domain(&self, x: f64) -> bool {
        match self {
            MonotoneMap::Identity | MonotoneMap::Exp => x.is_finite(),
            MonotoneMap::Ln | MonotoneMap::Power { .. } => x.is_finite() && x > 0.0,
        }
    }

    pub fn apply(&self, x: f64) -> f64 {
        match *self {
            MonotoneMap::Identity => x,
            MonotoneMap::Ln => x.ln(),
            MonotoneMap::Exp => x.exp(),
            MonotoneMap::Power { q } => x.powf(q),
        }
    }

    pub fn inverse(&self, y: f64) -> f64 {
        match *self {
            MonotoneMap::Identity => y,
            MonotoneMap::Ln => y.exp(),
            MonotoneMap::Exp => y.ln(),
            MonotoneMap::Power { q } => y.powf(1.0 / q),
        }
    }

    pub fn derivative(&self, x: f64) -> f64 {
        match *self {
            MonotoneMap::Identity => 1.0,
            MonotoneMap::Ln => 1.0 / x,
            MonotoneMap::Exp => x.exp(),
            MonotoneMap::Power { q } => q * x.powf(q - 1.0),
        }
    }
}

/// Aggregation rule.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AggregatorSpec {
    Sum,
    Mean,
    Max,
    Min,
    /// `ln((1/n) Σ exp xᵢ)`.
    LogSumExpMean,
    PowerMean {
        p: f64,
        #[serde(default)]
        learnable: bool,
    },
    QuasiArithmetic {
        g: MonotoneMap,
    },
    /// `(Σ wᵢ xᵢ^p)^(1/p)` with one weight per row.
    WeightedPowerMean {
        p: f64,
        weights: Vec<f64>,
    },
}

impl AggregatorSpec {
    pub fn power_mean(p: f64) -> Self {
        AggregatorSpec::PowerMean { p, learnable: false }
    }

    pub fn learnable_power_mean(p: f64) -> Self {
        AggregatorSpec::PowerMean { p, learnable: true }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            AggregatorSpec::PowerMean { p, .. } if !p.is_finite() => Err(Error::config(
                "power mean exponent must be finite; use max/min for the infinite limits",
            )),
            AggregatorSpec::WeightedPowerMean { p, weights } => {
                if !p.is_finite() {
                    return Err(Error::config("weighted power mean exponent must be finite"));
                }
                check_simplex(weights)
            }
            AggregatorSpec::QuasiArithmetic { g } => g.validate(),
            _ => Ok(()),
        }
    }

    /// Whether every aggregated entry must be strictly positive.
    pub fn requires_positive(&self) -> bool {
        match self {
            AggregatorSpec::PowerMean { .. } | AggregatorSpec::WeightedPowerMean { .. } => true,
            AggregatorSpec::QuasiArithmetic { g } => {
                matches!(g, MonotoneMap::Ln | MonotoneMap::Power { .. })
            }
            _ => false,
        }
    }

    pub fn is_learnable(&self) -> bool {
        matches!(self, AggregatorSpec::PowerMean { learnable: true, .. })
    }

    /// Current exponent, for the power-mean kinds.
    pub fn p(&self) -> Option<f64> {
        match self {
            AggregatorSpec::PowerMean { p, .. } | AggregatorSpec::WeightedPowerMean { p, .. } => {
                Some(*p)
            }
            _ => None,
        }
    }

    pub fn set_p(&mut self, value: f64) {
        if let AggregatorSpec::PowerMean { p, .. } | AggregatorSpec::WeightedPowerMean { p, .. } =
            self
        {
            *p = value;
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            AggregatorSpec::Sum => "sum",
            AggregatorSpec::Mean => "mean",
            AggregatorSpec::Max => "max",
            AggregatorSpec::Min => "min",
            AggregatorSpec::LogSumExpMean => "log_sum_exp_mean",
            AggregatorSpec::PowerMean { .. } => "power_mean",
            AggregatorSpec::QuasiArithmetic { .. } => "quasi_arithmetic",
            AggregatorSpec::WeightedPowerMean { .. } => "weighted_power_mean",
        }
    }
}

fn check_simplex(weights: &[f64]) -> Result<()> {
    if weights.is_empty() {
        return Err(Error::Validation("weights must be non-empty".into()));
    }
    if let Some(i) = weights.iter().position(|w| !(w.is_finite() && *w >= 0.0)) {
        return Err(Error::Validation(format!(
            "weight {i} is {} (must be finite and nonnegative)",
            weights[i]
        )));
    }
    let total: f64 = weights.iter().sum();
    if (total - 1.0).abs() > SIMPLEX_TOL {
        return Err(Error::Validation(format!(
            "weights sum to {total}, expected 1 within {SIMPLEX_TOL}"
        )));
    }
    Ok(())
}

/// Gradients of [`aggregate`] with respect to its inputs.
#[derive(Clone, Debug)]
pub struct AggregateGrad {
    pub emb: Matrix,
    /// Present for the power-mean kinds.
    pub p: Option<f64>,
}

/// `ln M_p` of `exp(y)` under weights, plus its partials.
struct LogPowerMean {
    value: f64,
    d_y: Vec<f64>,
    d_p: f64,
}

/// Cumulant expansion of `ln M_p` about `p = 0`; exact at `p = 0`.
fn log_power_mean_expansion(y: &[f64], w: &[f64], p: f64) -> LogPowerMean {
    let mean: f64 = y.iter().zip(w).map(|(y, w)| w * y).sum();
    let (mut k2, mut k3) = (0.0, 0.0);
    for (yi, wi) in y.iter().zip(w) {
        let d = yi - mean;
        k2 += wi * d * d;
        k3 += wi * d * d * d;
    }
    let value = mean + p * k2 / 2.0 + p * p * k3 / 6.0;
    let d_y = y
        .iter()
        .zip(w)
        .map(|(yi, wi)| {
            let d = yi - mean;
            wi * (1.0 + p * d + 0.5 * p * p * (d * d - k2))
        })
        .collect();
    LogPowerMean {
        value,
        d_y,
        d_p: k2 / 2.0 + p * k3 / 3.0,
    }
}

/// `y` are logs of the (positive) inputs; `w` are weights summing to one.
fn log_power_mean(y: &[f64], w: &[f64], p: f64) -> LogPowerMean {
    if p.abs() < GEOMETRIC_BRANCH_EPS {
        return log_power_mean_expansion(y, w, p);
    }
    let scaled: Vec<f64> = y.iter().zip(w).map(|(yi, wi)| p * yi + wi.ln()).collect();
    // weights are non-empty and at least one is positive
    let lse = logsumexp(&scaled).expect("non-empty");
    let value = lse / p;
    let soft: Vec<f64> = scaled.iter().map(|a| (a - lse).exp()).collect();
    let weighted_y: f64 = soft
        .iter()
        .zip(y)
        .filter(|(s, _)| **s > 0.0)
        .map(|(s, y)| s * y)
        .sum();
    LogPowerMean {
        value,
        d_y: soft,
        d_p: (weighted_y - value) / p,
    }
}

/// The near-zero branch of [`power_mean`] evaluated at any `p`.
///
/// Equals the geometric mean at `p = 0`; for small `|p|` it tracks the exact
/// power mean to third order.
pub fn geometric_expansion(values: &[f64], p: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::domain("power mean of an empty vector"));
    }
    if let Some(i) = values.iter().position(|x| !(x.is_finite() && *x > 0.0)) {
        return Err(Error::domain(format!("entry {i} is {} (must be positive)", values[i])));
    }
    let y: Vec<f64> = values.iter().map(|x| x.ln()).collect();
    let w = vec![1.0 / values.len() as f64; values.len()];
    Ok(log_power_mean_expansion(&y, &w, p).value.exp())
}

/// Column reduction: value and, on request, partials w.r.t. each entry and `p`.
struct Reduced {
    value: f64,
    grad: Option<(Vec<f64>, Option<f64>)>,
}

fn first_extreme(values: &[f64], better: impl Fn(f64, f64) -> bool) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if better(v, values[best]) {
            best = i;
        }
    }
    best
}

fn reduce(values: &[f64], weights: Option<&[f64]>, spec: &AggregatorSpec, want_grad: bool) -> Reduced {
    let n = values.len() as f64;
    match spec {
        AggregatorSpec::Sum => Reduced {
            value: values.iter().sum(),
            grad: want_grad.then(|| (vec![1.0; values.len()], None)),
        },
        AggregatorSpec::Mean => Reduced {
            value: values.iter().sum::<f64>() / n,
            grad: want_grad.then(|| (vec![1.0 / n; values.len()], None)),
        },
        AggregatorSpec::Max | AggregatorSpec::Min => {
            let idx = if matches!(spec, AggregatorSpec::Max) {
                first_extreme(values, |a, b| a > b)
            } else {
                first_extreme(values, |a, b| a < b)
            };
            Reduced {
                value: values[idx],
                grad: want_grad.then(|| {
                    let mut g = vec![0.0; values.len()];
                    g[idx] = 1.0;
                    (g, None)
                }),
            }
        }
        AggregatorSpec::LogSumExpMean => {
            let lse = logsumexp(values).expect("non-empty");
            Reduced {
                value: lse - n.ln(),
                grad: want_grad
                    .then(|| (values.iter().map(|v| (v - lse).exp()).collect(), None)),
            }
        }
        AggregatorSpec::PowerMean { p, .. } | AggregatorSpec::WeightedPowerMean { p, .. } => {
            let y: Vec<f64> = values.iter().map(|x| x.ln()).collect();
            let uniform;
            let w = match weights {
                Some(w) => w,
                None => {
                    uniform = vec![1.0 / n; values.len()];
                    &uniform
                }
            };
            // every weighted entry equal (incl. a single support point): M_p is
            // that entry exactly, with ∂M/∂xᵢ = wᵢ and ∂M/∂p = 0
            let mut support = values.iter().zip(w).filter(|(_, &wi)| wi > 0.0).map(|(x, _)| *x);
            let first = support.next().expect("positive total weight");
            if support.all(|x| x == first) {
                return Reduced {
                    value: first,
                    grad: want_grad.then(|| (w.to_vec(), Some(0.0))),
                };
            }
            let lpm = log_power_mean(&y, w, *p);
            let m = lpm.value.exp();
            Reduced {
                value: m,
                grad: want_grad.then(|| {
                    let d_x = lpm
                        .d_y
                        .iter()
                        .zip(values)
                        .map(|(d, x)| m * d / x)
                        .collect();
                    (d_x, Some(m * lpm.d_p))
                }),
            }
        }
        AggregatorSpec::QuasiArithmetic { g } => {
            let mean_g = values.iter().map(|&x| g.apply(x)).sum::<f64>() / n;
            let value = g.inverse(mean_g);
            Reduced {
                value,
                grad: want_grad.then(|| {
                    let outer = g.derivative(value);
                    (
                        values.iter().map(|&x| g.derivative(x) / (n * outer)).collect(),
                        None,
                    )
                }),
            }
        }
    }
}

fn valid_rows(emb: &Matrix, mask: &[bool]) -> Result<Vec<usize>> {
    if mask.len() != emb.rows() {
        return Err(Error::Shape {
            op: "aggregate mask",
            left: emb.shape(),
            right: (mask.len(), 1),
        });
    }
    let rows: Vec<usize> = (0..emb.rows()).filter(|&r| mask[r]).collect();
    if rows.is_empty() {
        return Err(Error::domain("aggregation over a set with no valid rows"));
    }
    Ok(rows)
}

fn row_weights(spec: &AggregatorSpec, emb: &Matrix, rows: &[usize]) -> Result<Option<Vec<f64>>> {
    let AggregatorSpec::WeightedPowerMean { weights, .. } = spec else {
        return Ok(None);
    };
    if weights.len() != emb.rows() {
        return Err(Error::Shape {
            op: "weighted power mean weights",
            left: emb.shape(),
            right: (weights.len(), 1),
        });
    }
    let selected: Vec<f64> = rows.iter().map(|&r| weights[r]).collect();
    let total: f64 = selected.iter().sum();
    if total <= 0.0 {
        return Err(Error::domain("all valid rows carry zero weight"));
    }
    Ok(Some(selected.iter().map(|w| w / total).collect()))
}

fn check_entries(emb: &Matrix, rows: &[usize], spec: &AggregatorSpec) -> Result<()> {
    let positive = spec.requires_positive();
    let g = match spec {
        AggregatorSpec::QuasiArithmetic { g } => Some(*g),
        _ => None,
    };
    for &r in rows {
        for (c, &v) in emb.row(r).iter().enumerate() {
            if !v.is_finite() {
                return Err(Error::NonFinite(format!("aggregate input at row {r}, column {c}")));
            }
            if positive && v <= 0.0 {
                return Err(Error::domain(format!(
                    "{} requires strictly positive entries; row {r}, column {c} is {v}",
                    spec.name()
                )));
            }
            if let Some(g) = g {
                if !g.in_domain(v) {
                    return Err(Error::domain(format!(
                        "row {r}, column {c} value {v} is outside the domain of {g:?}"
                    )));
                }
            }
        }
    }
    Ok(())
}

struct Prepared {
    rows: Vec<usize>,
    weights: Option<Vec<f64>>,
}

fn prepare(emb: &Matrix, mask: &[bool], spec: &AggregatorSpec) -> Result<Prepared> {
    spec.validate()?;
    let rows = valid_rows(emb, mask)?;
    check_entries(emb, &rows, spec)?;
    let weights = row_weights(spec, emb, &rows)?;
    Ok(Prepared { rows, weights })
}

/// Pools the valid rows of `emb` column by column.
pub fn aggregate(emb: &Matrix, mask: &[bool], spec: &AggregatorSpec) -> Result<Vec<f64>> {
    let prep = prepare(emb, mask, spec)?;
    let mut column = vec![0.0; prep.rows.len()];
    let mut out = Vec::with_capacity(emb.cols());
    for c in 0..emb.cols() {
        for (slot, &r) in column.iter_mut().zip(&prep.rows) {
            *slot = emb.get(r, c);
        }
        let value = reduce(&column, prep.weights.as_deref(), spec, false).value;
        if !value.is_finite() {
            return Err(Error::domain(format!(
                "{} produced a non-finite value in column {c}",
                spec.name()
            )));
        }
        out.push(value);
    }
    Ok(out)
}

/// Backpropagates `upstream` (one entry per column) through [`aggregate`].
///
/// Max and Min route the whole gradient to the lowest-index extreme row.
pub fn aggregate_backward(
    emb: &Matrix,
    mask: &[bool],
    spec: &AggregatorSpec,
    upstream: &[f64],
) -> Result<AggregateGrad> {
    if upstream.len() != emb.cols() {
        return Err(Error::Shape {
            op: "aggregate_backward upstream",
            left: emb.shape(),
            right: (1, upstream.len()),
        });
    }
    let prep = prepare(emb, mask, spec)?;
    let mut grad = Matrix::zeros(emb.rows(), emb.cols());
    let mut grad_p = spec.p().map(|_| 0.0);
    let mut column = vec![0.0; prep.rows.len()];
    for (c, &up) in upstream.iter().enumerate() {
        for (slot, &r) in column.iter_mut().zip(&prep.rows) {
            *slot = emb.get(r, c);
        }
        let (d_x, d_p) = reduce(&column, prep.weights.as_deref(), spec, true)
            .grad
            .expect("requested");
        for (&r, d) in prep.rows.iter().zip(d_x) {
            grad.set(r, c, up * d);
        }
        if let (Some(acc), Some(dp)) = (grad_p.as_mut(), d_p) {
            *acc += up * dp;
        }
    }
    if !grad.is_finite() || grad_p.is_some_and(|g| !g.is_finite()) {
        return Err(Error::NonFinite("aggregate gradient".into()));
    }
    Ok(AggregateGrad { emb: grad, p: grad_p })
}

/// Row chosen per column by Max/Min (the subgradient support); `None` for
/// smooth kinds.
pub fn selected_rows(emb: &Matrix, mask: &[bool], spec: &AggregatorSpec) -> Result<Option<Vec<usize>>> {
    let better: fn(f64, f64) -> bool = match spec {
        AggregatorSpec::Max => |a, b| a > b,
        AggregatorSpec::Min => |a, b| a < b,
        _ => return Ok(None),
    };
    let rows = valid_rows(emb, mask)?;
    let picks = (0..emb.cols())
        .map(|c| {
            let column: Vec<f64> = rows.iter().map(|&r| emb.get(r, c)).collect();
            rows[first_extreme(&column, better)]
        })
        .collect();
    Ok(Some(picks))
}

/// Unweighted power mean of positive values.
pub fn power_mean(values: &[f64], p: f64) -> Result<f64> {
    let emb = Matrix::column(values);
    aggregate(&emb, &vec![true; values.len()], &AggregatorSpec::power_mean(p)).map(|v| v[0])
}

/// `(Σ wᵢ xᵢ^p)^(1/p)`, with `exp(Σ wᵢ ln xᵢ)` as the `p → 0` limit.
pub fn weighted_power_mean(values: &[f64], weights: &[f64], p: f64) -> Result<f64> {
    if values.len() != weights.len() {
        return Err(Error::Shape {
            op: "weighted_power_mean",
            left: (values.len(), 1),
            right: (weights.len(), 1),
        });
    }
    check_simplex(weights)?;
    let spec = AggregatorSpec::WeightedPowerMean {
        p,
        weights: weights.to_vec(),
    };
    aggregate(&Matrix::column(values), &vec![true; values.len()], &spec).map(|v| v[0])
}

/// `g⁻¹((1/n) Σ g(xᵢ))`, evaluated literally.
pub fn quasi_arithmetic_mean(values: &[f64], g: MonotoneMap) -> Result<f64> {
    g.validate()?;
    if values.is_empty() {
        return Err(Error::domain("quasi-arithmetic mean of an empty vector"));
    }
    if let Some(i) = values.iter().position(|&x| !g.in_domain(x)) {
        return Err(Error::domain(format!(
            "value {} at index {i} is outside the domain of {g:?}",
            values[i]
        )));
    }
    let mean = values.iter().map(|&x| g.apply(x)).sum::<f64>() / values.len() as f64;
    let out = g.inverse(mean);
    if out.is_finite() {
        Ok(out)
    } else {
        Err(Error::domain(format!("quasi-arithmetic mean under {g:?} is not finite")))
    }
}

/// Summation carried out in the space mapped by `g⁻¹`: `g(Σ g⁻¹(xᵢ))`.
///
/// With `g = ln` this is log-sum-exp.
pub fn isomorphic_sum(values: &[f64], g: MonotoneMap) -> Result<f64> {
    g.validate()?;
    if values.is_empty() {
        return Err(Error::domain("isomorphic sum of an empty vector"));
    }
    let inner: f64 = values.iter().map(|&x| g.inverse(x)).sum();
    if !g.in_domain(inner) {
        return Err(Error::domain(format!(
            "inner sum {inner} is outside the domain of {g:?}"
        )));
    }
    let out = g.apply(inner);
    if out.is_finite() {
        Ok(out)
    } else {
        Err(Error::domain(format!("isomorphic sum under {g:?} is not finite")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;
    use proptest::prelude::*;

    fn all(n: usize) -> Vec<bool> {
        vec![true; n]
    }

    fn col(values: &[f64], spec: &AggregatorSpec) -> f64 {
        aggregate(&Matrix::column(values), &all(values.len()), spec).unwrap()[0]
    }

    fn random_positive(rng: &mut Rng, rows: usize, cols: usize) -> Matrix {
        Matrix::new(rows, cols, (0..rows * cols).map(|_| rng.uniform_range(0.1, 3.0)).collect())
            .unwrap()
    }

    #[test]
    fn identical_rows_reduce_to_the_row() {
        let x = [0.7, 2.0, 5.5];
        let emb = Matrix::from_rows(&[x, x, x, x]).unwrap();
        let kinds = [
            AggregatorSpec::Mean,
            AggregatorSpec::Max,
            AggregatorSpec::Min,
            AggregatorSpec::power_mean(-3.0),
            AggregatorSpec::power_mean(0.0),
            AggregatorSpec::power_mean(2.5),
            AggregatorSpec::power_mean(60.0),
        ];
        for spec in kinds {
            let out = aggregate(&emb, &all(4), &spec).unwrap();
            for (o, e) in out.iter().zip(x) {
                assert!((o - e).abs() <= 1e-12 * e, "{spec:?}: {o} vs {e}");
            }
        }
    }

    #[test]
    fn classical_means() {
        assert!((col(&[1.0, 4.0, 4.0], &AggregatorSpec::power_mean(-1.0)) - 2.0).abs() < 1e-12);
        assert!((col(&[1.0, 4.0, 16.0], &AggregatorSpec::power_mean(0.0)) - 4.0).abs() < 1e-12);
        assert!((col(&[1.0, 4.0, 16.0], &AggregatorSpec::power_mean(1.0)) - 7.0).abs() < 1e-12);
        let big = col(&[1.0, 5.0, 3.0], &AggregatorSpec::power_mean(200.0));
        assert!((big - 5.0).abs() / 5.0 < 1e-2);
        assert!(big <= 5.0);
    }

    #[test]
    fn sum_and_log_sum_exp_mean() {
        assert_eq!(col(&[1.0, 2.0, 3.5], &AggregatorSpec::Sum), 6.5);
        let lse = col(&[0.5, 1.5], &AggregatorSpec::LogSumExpMean);
        let direct = ((0.5f64.exp() + 1.5f64.exp()) / 2.0).ln();
        assert!((lse - direct).abs() < 1e-14);
    }

    #[test]
    fn masked_rows_are_absent() {
        let emb = Matrix::from_rows(&[[1.0], [100.0], [3.0]]).unwrap();
        let mask = [true, false, true];
        assert_eq!(aggregate(&emb, &mask, &AggregatorSpec::Mean).unwrap(), vec![2.0]);
        assert_eq!(aggregate(&emb, &mask, &AggregatorSpec::Max).unwrap(), vec![3.0]);
        let g = aggregate_backward(&emb, &mask, &AggregatorSpec::Mean, &[1.0]).unwrap();
        assert_eq!(g.emb.col_values(0), vec![0.5, 0.0, 0.5]);
    }

    #[test]
    fn domain_errors() {
        let emb = Matrix::from_rows(&[[1.0, 2.0], [3.0, -0.5]]).unwrap();
        match aggregate(&emb, &all(2), &AggregatorSpec::power_mean(2.0)) {
            Err(Error::Domain(msg)) => assert!(msg.contains("row 1, column 1"), "{msg}"),
            other => panic!("expected domain error, got {other:?}"),
        }
        let none = aggregate(&emb, &[false, false], &AggregatorSpec::Mean);
        assert!(matches!(none, Err(Error::Domain(_))));
        let ln = AggregatorSpec::QuasiArithmetic { g: MonotoneMap::Ln };
        assert!(matches!(aggregate(&emb, &all(2), &ln), Err(Error::Domain(_))));
        // sums do not care about sign
        assert!(aggregate(&emb, &all(2), &AggregatorSpec::Sum).is_ok());
    }

    #[test]
    fn infinite_exponent_rejected() {
        let err = AggregatorSpec::power_mean(f64::INFINITY).validate();
        assert!(matches!(err, Err(Error::Config(_))));
    }

    #[test]
    fn mean_backward_is_uniform() {
        let emb = Matrix::from_rows(&[[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]]).unwrap();
        let g = aggregate_backward(&emb, &all(3), &AggregatorSpec::power_mean(1.0), &[0.3, -1.2])
            .unwrap();
        for r in 0..3 {
            assert!((g.emb.get(r, 0) - 0.1).abs() < 1e-12);
            assert!((g.emb.get(r, 1) + 0.4).abs() < 1e-12);
        }
    }

    #[test]
    fn p_gradient_vanishes_on_constant_columns() {
        let emb = Matrix::from_rows(&[[2.5, 0.3], [2.5, 0.3], [2.5, 0.3]]).unwrap();
        for p in [-7.0, -1.0, 0.0, 5e-5, 0.5, 3.0, 40.0] {
            let g =
                aggregate_backward(&emb, &all(3), &AggregatorSpec::power_mean(p), &[1.0, 1.0]).unwrap();
            assert!(g.p.unwrap().abs() < 1e-12, "p={p}: {:?}", g.p);
        }
    }

    #[test]
    fn max_ties_go_to_lowest_row() {
        let emb = Matrix::from_rows(&[[1.0], [4.0], [4.0]]).unwrap();
        let g = aggregate_backward(&emb, &all(3), &AggregatorSpec::Max, &[1.0]).unwrap();
        assert_eq!(g.emb.col_values(0), vec![0.0, 1.0, 0.0]);
        assert!(g.p.is_none());
        let picks = selected_rows(&emb, &all(3), &AggregatorSpec::Max).unwrap();
        assert_eq!(picks, Some(vec![1]));
    }

    #[test]
    fn quasi_arithmetic_examples() {
        assert_eq!(quasi_arithmetic_mean(&[2.0, 4.0], MonotoneMap::Identity).unwrap(), 3.0);
        let geo = quasi_arithmetic_mean(&[1.0, 4.0, 16.0], MonotoneMap::Ln).unwrap();
        assert!((geo - 4.0).abs() < 1e-12);
        assert!(quasi_arithmetic_mean(&[1.0, -1.0], MonotoneMap::Ln).is_err());
        assert!(quasi_arithmetic_mean(&[], MonotoneMap::Identity).is_err());
    }

    #[test]
    fn quasi_arithmetic_power_equals_power_mean() {
        let mut rng = Rng::new(21);
        for _ in 0..200 {
            let n = 1 + rng.below(8);
            let values: Vec<f64> = (0..n).map(|_| rng.uniform_range(0.05, 5.0)).collect();
            let q = rng.uniform_range(-6.0, 6.0);
            if q.abs() < 0.05 {
                continue;
            }
            let literal = quasi_arithmetic_mean(&values, MonotoneMap::Power { q }).unwrap();
            let stable = power_mean(&values, q).unwrap();
            assert!((literal - stable).abs() <= 1e-10 * stable.max(1.0), "q={q}");
        }
    }

    #[test]
    fn weighted_examples() {
        let mut rng = Rng::new(4);
        for _ in 0..100 {
            let n = 1 + rng.below(7);
            let values: Vec<f64> = (0..n).map(|_| rng.uniform_range(0.1, 4.0)).collect();
            let p = rng.uniform_range(-5.0, 5.0);
            let uniform = vec![1.0 / n as f64; n];
            let w = weighted_power_mean(&values, &uniform, p).unwrap();
            let u = power_mean(&values, p).unwrap();
            assert!((w - u).abs() <= 1e-12 * u.max(1.0));
            let j = rng.below(n);
            let mut one_hot = vec![0.0; n];
            one_hot[j] = 1.0;
            let pick = weighted_power_mean(&values, &one_hot, p).unwrap();
            assert!((pick - values[j]).abs() <= 1e-15 * values[j].max(1.0), "{pick} vs {}", values[j]);
        }
        let c = weighted_power_mean(&[2.0, 2.0], &[0.25, 0.75], 3.0).unwrap();
        assert!((c - 2.0).abs() < 1e-15);
        assert!(matches!(
            weighted_power_mean(&[1.0, 2.0], &[0.5, 0.6], 1.0),
            Err(Error::Validation(_))
        ));
        assert!(matches!(
            weighted_power_mean(&[1.0, 2.0], &[1.5, -0.5], 1.0),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn sum_isomorphism_with_ln_is_logsumexp() {
        let mut rng = Rng::new(8);
        for _ in 0..100 {
            let n = 1 + rng.below(10);
            let values: Vec<f64> = (0..n).map(|_| rng.uniform_range(-5.0, 5.0)).collect();
            let iso = isomorphic_sum(&values, MonotoneMap::Ln).unwrap();
            let lse = logsumexp(&values).unwrap();
            assert!((iso - lse).abs() < 1e-10);
        }
        let direct = (0.5f64.exp() + 1.5f64.exp()).ln();
        assert!((isomorphic_sum(&[0.5, 1.5], MonotoneMap::Ln).unwrap() - direct).abs() < 1e-14);
        assert_eq!(isomorphic_sum(&[1.0, 2.5], MonotoneMap::Identity).unwrap(), 3.5);
    }

    #[test]
    fn monotone_in_p() {
        let ps = [-8.0, -4.0, -1.0, 0.0, 1.0, 2.0, 4.0, 8.0];
        let mut rng = Rng::new(99);
        for _ in 0..100 {
            let n = 2 + rng.below(8);
            let values: Vec<f64> = (0..n).map(|_| rng.uniform_range(0.1, 10.0)).collect();
            let means: Vec<f64> = ps.iter().map(|&p| power_mean(&values, p).unwrap()).collect();
            for w in means.windows(2) {
                assert!(w[1] > w[0], "{values:?}: {means:?}");
            }
        }
    }

    #[test]
    fn limit_consistency() {
        let mut rng = Rng::new(5);
        for _ in 0..100 {
            let n = 1 + rng.below(9);
            let values: Vec<f64> = (0..n).map(|_| rng.uniform_range(0.1, 10.0)).collect();
            let max = values.iter().copied().fold(0.0, f64::max);
            for p in [0.5, 3.0, 30.0, 300.0] {
                let m = power_mean(&values, p).unwrap();
                let bound = max * ((n as f64).powf(1.0 / p) - 1.0);
                assert!((m - max).abs() <= bound + 1e-12 * max);
            }
            for p in [1e-3, -1e-3] {
                let m = power_mean(&values, p).unwrap();
                let g = geometric_expansion(&values, p).unwrap();
                assert!((m - g).abs() / g < 1e-5);
            }
            let logs: Vec<f64> = values.iter().map(|x| x.ln()).collect();
            let geo = (logs.iter().sum::<f64>() / n as f64).exp();
            assert!((geometric_expansion(&values, 0.0).unwrap() - geo).abs() < 1e-12 * geo);
        }
    }

    #[test]
    fn branches_agree_at_the_switch() {
        let mut rng = Rng::new(17);
        for _ in 0..100 {
            let n = 2 + rng.below(6);
            let values: Vec<f64> = (0..n).map(|_| rng.uniform_range(0.1, 10.0)).collect();
            let inside = power_mean(&values, GEOMETRIC_BRANCH_EPS * (1.0 - 1e-9)).unwrap();
            let outside = power_mean(&values, GEOMETRIC_BRANCH_EPS * (1.0 + 1e-9)).unwrap();
            assert!((inside - outside).abs() / inside < 1e-10);
        }
    }

    /// Central-difference reference, independent of the analytic backward.
    fn finite_difference(emb: &Matrix, spec: &AggregatorSpec, up: &[f64], h: f64) -> (Matrix, f64) {
        let objective = |e: &Matrix, s: &AggregatorSpec| -> f64 {
            aggregate(e, &all(e.rows()), s)
                .unwrap()
                .iter()
                .zip(up)
                .map(|(a, u)| a * u)
                .sum()
        };
        let mut g = Matrix::zeros(emb.rows(), emb.cols());
        for r in 0..emb.rows() {
            for c in 0..emb.cols() {
                let mut plus = emb.clone();
                plus.set(r, c, emb.get(r, c) + h);
                let mut minus = emb.clone();
                minus.set(r, c, emb.get(r, c) - h);
                g.set(r, c, (objective(&plus, spec) - objective(&minus, spec)) / (2.0 * h));
            }
        }
        let p = spec.p().unwrap_or(0.0);
        let (mut sp, mut sm) = (spec.clone(), spec.clone());
        sp.set_p(p + h);
        sm.set_p(p - h);
        (g, (objective(emb, &sp) - objective(emb, &sm)) / (2.0 * h))
    }

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-4)
    }

    #[test]
    fn p17_gradients_match_finite_differences() {
        let mut rng = Rng::new(1);
        let emb = random_positive(&mut rng, 4, 3);
        let up = [0.7, -1.1, 0.4];
        let spec = AggregatorSpec::power_mean(1.7);
        let g = aggregate_backward(&emb, &all(4), &spec, &up).unwrap();
        let (fd, fd_p) = finite_difference(&emb, &spec, &up, 1e-5);
        for (a, b) in g.emb.data().iter().zip(fd.data()) {
            assert!(rel_err(*a, *b) < 1e-6, "{a} vs {b}");
        }
        assert!(rel_err(g.p.unwrap(), fd_p) < 1e-6);
    }

    #[test]
    fn gradients_match_finite_differences_across_kinds() {
        let mut rng = Rng::new(2);
        let mut worst = 0.0f64;
        for trial in 0..50 {
            let rows = 1 + rng.below(6);
            let cols = 1 + rng.below(4);
            let emb = random_positive(&mut rng, rows, cols);
            let up: Vec<f64> = (0..cols).map(|_| rng.normal()).collect();
            let p = match trial % 5 {
                0 => rng.uniform_range(-5e-5, 5e-5),
                1 => 0.0,
                2 => rng.uniform_range(-8.0, -0.5),
                _ => rng.uniform_range(0.2, 8.0),
            };
            let mut weights: Vec<f64> = (0..rows).map(|_| rng.uniform()).collect();
            let total: f64 = weights.iter().sum();
            weights.iter_mut().for_each(|w| *w /= total);
            let specs = [
                AggregatorSpec::power_mean(p),
                AggregatorSpec::WeightedPowerMean { p, weights },
                AggregatorSpec::Mean,
                AggregatorSpec::Sum,
                AggregatorSpec::LogSumExpMean,
                AggregatorSpec::QuasiArithmetic { g: MonotoneMap::Ln },
                AggregatorSpec::QuasiArithmetic { g: MonotoneMap::Power { q: 2.5 } },
                AggregatorSpec::QuasiArithmetic { g: MonotoneMap::Exp },
            ];
            for spec in &specs {
                let g = aggregate_backward(&emb, &all(rows), spec, &up).unwrap();
                let (fd, fd_p) = finite_difference(&emb, spec, &up, 1e-5);
                for (a, b) in g.emb.data().iter().zip(fd.data()) {
                    worst = worst.max(rel_err(*a, *b));
                }
                if let Some(gp) = g.p {
                    worst = worst.max(rel_err(gp, fd_p));
                }
            }
        }
        assert!(worst < 1e-5, "worst relative error {worst}");
    }

    proptest! {
        #[test]
        fn permutation_invariance(
            rows in proptest::collection::vec(proptest::collection::vec(0.05f64..20.0, 3), 1..8),
            p in -12.0f64..12.0,
            seed in any::<u64>(),
        ) {
            let emb = Matrix::from_rows(&rows).unwrap();
            let perm = Rng::new(seed).permutation(rows.len());
            let permuted = emb.select_rows(&perm);
            let mask = all(rows.len());
            for spec in [
                AggregatorSpec::power_mean(p),
                AggregatorSpec::Mean,
                AggregatorSpec::Max,
                AggregatorSpec::Min,
                AggregatorSpec::LogSumExpMean,
            ] {
                let a = aggregate(&emb, &mask, &spec).unwrap();
                let b = aggregate(&permuted, &mask, &spec).unwrap();
                for (x, y) in a.iter().zip(&b) {
                    prop_assert!((x - y).abs() <= 1e-12 * x.abs().max(1.0));
                }
            }
        }

        #[test]
        fn monotone_map_round_trip(y in -20.0f64..20.0, q in 0.2f64..4.0) {
            for g in [MonotoneMap::Identity, MonotoneMap::Ln, MonotoneMap::Power { q }] {
                let x = g.inverse(y.abs() + 0.01);
                if g.in_domain(x) {
                    prop_assert!((g.apply(x) - (y.abs() + 0.01)).abs() < 1e-10 * y.abs().max(1.0));
                }
            }
            let e = MonotoneMap::Exp;
            prop_assert!((e.apply(e.inverse(y.abs() + 0.01)) - (y.abs() + 0.01)).abs() < 1e-10 * y.abs().max(1.0));
        }
    }
}
