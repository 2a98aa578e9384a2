//! Brute-force property checks: permutation invariance, (sub)modularity over
//! a power set, finite-difference gradients and sum isomorphism.

use itertools::Itertools;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::aggregators::{aggregate, MonotoneMap};
use crate::error::{Error, Result};
use crate::numerics::{logsumexp, Matrix, Rng};
use crate::setnn::{SetBatch, SetModel};

/// Largest ground set for the pairwise subset checks.
pub const MAX_CHECK_GROUND: usize = 10;

/// Sets up to this size are checked under every permutation.
pub const EXHAUSTIVE_PERM_SIZE: usize = 6;

/// Outcome of one property check. `passed` iff `worst_violation ≤ tolerance`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckReport {
    pub name: String,
    pub passed: bool,
    pub worst_violation: f64,
    pub tolerance: f64,
    pub witness: Option<Value>,
    /// Cases excluded from the maximum (kinks, undefined empty-set values).
    pub skipped: usize,
    pub evaluated: usize,
}

impl CheckReport {
    fn new(name: &str, worst: f64, tol: f64, witness: Option<Value>, evaluated: usize, skipped: usize) -> Self {
        CheckReport {
            name: name.to_string(),
            passed: worst <= tol,
            worst_violation: worst,
            tolerance: tol,
            witness,
            skipped,
            evaluated,
        }
    }
}

/// Anything that maps a set (rows = elements) to an output vector.
pub trait SetPredictor: Sync {
    fn predict_set(&self, set: &Matrix) -> Result<Vec<f64>>;

    /// One output row per set.
    fn predict_sets(&self, sets: &[Matrix]) -> Result<Vec<Vec<f64>>> {
        sets.iter().map(|s| self.predict_set(s)).collect()
    }
}

impl SetPredictor for SetModel {
    fn predict_set(&self, set: &Matrix) -> Result<Vec<f64>> {
        self.predict(set)
    }

    fn predict_sets(&self, sets: &[Matrix]) -> Result<Vec<Vec<f64>>> {
        let out = self.predict_batch(&SetBatch::unlabeled(sets)?)?;
        Ok(out.iter_rows().map(<[f64]>::to_vec).collect())
    }
}

/// Returns the first element: the simplest order-sensitive "set function".
#[derive(Clone, Copy, Debug, Default)]
pub struct FirstElementProbe;

impl SetPredictor for FirstElementProbe {
    fn predict_set(&self, set: &Matrix) -> Result<Vec<f64>> {
        if set.rows() == 0 {
            return Err(Error::domain("empty set"));
        }
        Ok(set.row(0).to_vec())
    }
}

fn max_abs_gap(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Largest `|f(S) − f(πS)|` over `sets` and permutations π: all of them for
/// sets of at most [`EXHAUSTIVE_PERM_SIZE`] elements, `n_perms` sampled
/// otherwise.
pub fn check_permutation_invariance(
    f: &dyn SetPredictor,
    sets: &[Matrix],
    n_perms: usize,
    tol: f64,
    rng: &mut Rng,
) -> Result<CheckReport> {
    if !(tol > 0.0) {
        return Err(Error::config("tolerance must be positive"));
    }
    let mut worst = 0.0;
    let mut witness = None;
    let mut evaluated = 0;
    for (si, set) in sets.iter().enumerate() {
        let n = set.rows();
        let perms: Vec<Vec<usize>> = if n <= EXHAUSTIVE_PERM_SIZE {
            (0..n).permutations(n).collect()
        } else {
            (0..n_perms).map(|_| rng.permutation(n)).collect()
        };
        let permuted: Vec<Matrix> = perms.iter().map(|p| set.select_rows(p)).collect();
        let base = f.predict_set(set)?;
        let outs = f.predict_sets(&permuted)?;
        for (perm, out) in perms.iter().zip(&outs) {
            evaluated += 1;
            let gap = max_abs_gap(&base, out);
            if gap.is_nan() {
                return Err(Error::NonFinite(format!("prediction for set {si}")));
            }
            if gap > worst {
                worst = gap;
                witness = Some(json!({ "set_index": si, "permutation": perm, "deviation": gap }));
            }
        }
    }
    Ok(CheckReport::new("permutation_invariance", worst, tol, witness, evaluated, 0))
}

/// A real-valued function on the subsets of `{0, …, n−1}`, indexed by
/// bitmask. The empty set may be undefined.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SetFunctionTable {
    n: usize,
    empty: Option<f64>,
    /// Entry `mask − 1` holds `f(mask)`.
    values: Vec<f64>,
}

impl SetFunctionTable {
    pub fn new(n: usize, empty: Option<f64>, values: Vec<f64>) -> Result<Self> {
        if n > 31 || values.len() != (1usize << n) - 1 {
            return Err(Error::Validation(format!(
                "{} values do not cover the non-empty subsets of {n} elements",
                values.len()
            )));
        }
        Ok(SetFunctionTable { n, empty, values })
    }

    /// Tabulates `f` on every non-empty subset.
    pub fn from_fn(n: usize, empty: Option<f64>, f: impl Fn(u32) -> f64) -> Result<Self> {
        if n > 31 {
            return Err(Error::Resource(format!("{n} elements is too many to tabulate")));
        }
        SetFunctionTable::new(n, empty, (1u32..(1 << n)).map(f).collect())
    }

    pub fn ground_size(&self) -> usize {
        self.n
    }

    pub fn value(&self, mask: u32) -> Option<f64> {
        if mask == 0 {
            self.empty
        } else {
            self.values.get(mask as usize - 1).copied()
        }
    }

    pub fn num_defined(&self) -> usize {
        self.values.len() + usize::from(self.empty.is_some())
    }
}

fn members(mask: u32) -> Vec<usize> {
    (0..32).filter(|i| mask & (1 << i) != 0).collect()
}

/// `f(S) + f(T) − f(S∪T) − f(S∩T)` over all pairs of non-empty subsets with
/// `S ≤ T`; pairs with undefined `f(S∩T)` are counted as skipped. Returns the
/// pair minimizing `score(gap)`, plus evaluated and skipped counts.
fn scan_pairs(
    table: &SetFunctionTable,
    score: impl Fn(f64) -> f64 + Sync,
) -> Result<(f64, Option<(u32, u32, f64)>, usize, usize)> {
    let n = table.ground_size();
    if n > MAX_CHECK_GROUND {
        return Err(Error::Resource(format!(
            "pairwise subset checks are limited to {MAX_CHECK_GROUND} elements, got {n}"
        )));
    }
    let full = (1u32 << n) - 1;
    let per_s: Vec<(f64, Option<(u32, u32, f64)>, usize, usize)> = (1..=full)
        .into_par_iter()
        .map(|s| {
            let mut best = f64::INFINITY;
            let mut arg = None;
            let (mut evaluated, mut skipped) = (0, 0);
            let fs = table.value(s).expect("non-empty");
            for t in s..=full {
                let Some(fi) = table.value(s & t) else {
                    skipped += 1;
                    continue;
                };
                let gap = fs + table.value(t).expect("non-empty") - table.value(s | t).expect("non-empty") - fi;
                evaluated += 1;
                if gap.is_nan() {
                    return (f64::NAN, None, evaluated, skipped);
                }
                let sc = score(gap);
                if sc < best {
                    best = sc;
                    arg = Some((s, t, gap));
                }
            }
            (best, arg, evaluated, skipped)
        })
        .collect();
    let mut best = f64::INFINITY;
    let mut arg = None;
    let (mut evaluated, mut skipped) = (0, 0);
    for (b, a, e, k) in per_s {
        if b.is_nan() {
            return Err(Error::NonFinite("set function value".into()));
        }
        evaluated += e;
        skipped += k;
        if b < best {
            best = b;
            arg = a;
        }
    }
    Ok((best, arg, evaluated, skipped))
}

fn pair_witness(table: &SetFunctionTable, (s, t, gap): (u32, u32, f64)) -> Value {
    json!({
        "s": members(s),
        "t": members(t),
        "f_s": table.value(s),
        "f_t": table.value(t),
        "f_union": table.value(s | t),
        "f_intersection": table.value(s & t),
        "gap": gap,
    })
}

/// Largest `|f(S) + f(T) − f(S∪T) − f(S∩T)|`.
pub fn check_modularity(table: &SetFunctionTable, tol: f64) -> Result<CheckReport> {
    let (best, arg, evaluated, skipped) = scan_pairs(table, |g| -g.abs())?;
    let worst = if evaluated == 0 { 0.0 } else { -best };
    let witness = arg.filter(|a| a.2.abs() > tol).map(|a| pair_witness(table, a));
    Ok(CheckReport::new("modularity", worst, tol, witness, evaluated, skipped))
}

/// `worst_violation` is minus the smallest slack
/// `f(S) + f(T) − f(S∪T) − f(S∩T)`, so it is ≤ 0 for submodular functions.
pub fn check_submodularity(table: &SetFunctionTable, tol: f64) -> Result<CheckReport> {
    let (best, arg, evaluated, skipped) = scan_pairs(table, |g| g)?;
    let worst = if evaluated == 0 { 0.0 } else { -best };
    let witness = arg.filter(|a| a.2 < -tol).map(|a| pair_witness(table, a));
    Ok(CheckReport::new("submodularity", worst, tol, witness, evaluated, skipped))
}

/// `|a − b| / max(|a|, |b|, floor)`; the floor keeps near-zero gradients from
/// inflating the ratio with rounding noise.
pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Denominator floor used by [`grad_check`].
pub const GRAD_CHECK_FLOOR: f64 = 1e-4;

/// Compares backward gradients with central differences of the scalar
/// `Σ c ∘ f(batch)` for fixed random `c`, over every parameter (including
/// `p` when learnable). Coordinates whose ±h evaluations cross a kink (ReLU
/// sign change, Max/Min argmax change, power-mean branch switch) are skipped.
pub fn grad_check(model: &SetModel, batch: &SetBatch, h: f64, tol: f64) -> Result<CheckReport> {
    if !(1e-7..=1e-3).contains(&h) {
        return Err(Error::config(format!("step h = {h} outside [1e-7, 1e-3]")));
    }
    let mut rng = Rng::new(0x5eed_c0de);
    let coeffs = Matrix::new(
        batch.len(),
        model.output_dim(),
        (0..batch.len() * model.output_dim()).map(|_| rng.normal()).collect(),
    )?;
    let objective = |m: &SetModel| -> Result<(f64, u64)> {
        let (out, cache) = m.forward(batch)?;
        let v: f64 = out.data().iter().zip(coeffs.data()).map(|(a, b)| a * b).sum();
        Ok((v, cache.branch_signature()))
    };
    let (_, cache) = model.forward(batch)?;
    let base_sig = cache.branch_signature();
    let analytic = model.backward(batch, &cache, &coeffs)?.flatten();
    let params = model.params();
    let mut probe = model.clone();
    let mut worst = 0.0;
    let mut witness = None;
    let (mut evaluated, mut skipped) = (0, 0);
    for i in 0..params.len() {
        let mut shifted = params.clone();
        shifted[i] = params[i] + h;
        probe.set_params(&shifted)?;
        let (plus, sig_plus) = objective(&probe)?;
        shifted[i] = params[i] - h;
        probe.set_params(&shifted)?;
        let (minus, sig_minus) = objective(&probe)?;
        if sig_plus != base_sig || sig_minus != base_sig {
            skipped += 1;
            continue;
        }
        let numeric = (plus - minus) / (2.0 * h);
        if !numeric.is_finite() {
            return Err(Error::NonFinite(format!("finite difference for parameter {i}")));
        }
        evaluated += 1;
        let err = relative_error(analytic[i], numeric, GRAD_CHECK_FLOOR);
        if err > worst {
            worst = err;
            witness = Some(json!({ "parameter": i, "analytic": analytic[i], "numeric": numeric }));
        }
    }
    Ok(CheckReport::new("grad_check", worst, tol, witness, evaluated, skipped))
}

/// `g(Σ g⁻¹(xᵢ))` by direct evaluation, independent of the aggregator code.
fn isomorphic_sum_direct(values: &[f64], g: MonotoneMap) -> f64 {
    match g {
        MonotoneMap::Identity => values.iter().sum(),
        MonotoneMap::Ln => values.iter().map(|x| x.exp()).sum::<f64>().ln(),
        MonotoneMap::Exp => values.iter().product(),
        MonotoneMap::Power { q } => values.iter().map(|x| x.powf(1.0 / q)).sum::<f64>().powf(q),
    }
}

/// Checks the composed aggregator `g ∘ sum ∘ g⁻¹` against direct evaluation,
/// and for `g = ln` against logsumexp. Violations are relative.
pub fn check_sum_isomorphism(g: MonotoneMap, sets: &[Vec<f64>], tol: f64) -> Result<CheckReport> {
    g.validate()?;
    let mut worst = 0.0;
    let mut witness = None;
    for (si, values) in sets.iter().enumerate() {
        let mapped = Matrix::column(&values.iter().map(|&x| g.inverse(x)).collect::<Vec<_>>());
        if !mapped.is_finite() {
            return Err(Error::domain(format!("set {si} is outside the range of {g:?}")));
        }
        let inner = aggregate(&mapped, &vec![true; values.len()], &crate::aggregators::AggregatorSpec::Sum)?[0];
        if !g.in_domain(inner) {
            return Err(Error::domain(format!("set {si}: inner sum {inner} outside the domain of {g:?}")));
        }
        let composed = g.apply(inner);
        let mut references = vec![isomorphic_sum_direct(values, g)];
        if g == MonotoneMap::Ln {
            references.push(logsumexp(values)?);
        }
        for r in references {
            let err = relative_error(composed, r, 1.0);
            if err > worst {
                worst = err;
                witness = Some(json!({ "set_index": si, "composed": composed, "direct": r }));
            }
        }
    }
    Ok(CheckReport::new("sum_isomorphism", worst, tol, witness, sets.len(), 0))
}
