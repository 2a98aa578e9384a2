//! Janossy pooling: permutation invariance obtained by averaging a
//! permutation-sensitive function over orderings of the input set.

use std::cmp::Ordering;

use itertools::Itertools;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{pairwise_sum, Matrix, Rng};
use crate::setnn::{Mlp, MlpSpec};

/// Largest set accepted by [`janossy_full`] (8! orderings).
pub const MAX_FULL_SET: usize = 8;

/// Largest number of ordered tuples [`janossy_k`] will enumerate.
pub const MAX_TUPLES: u64 = 1_000_000;

/// A function of an ordered tuple of element vectors.
pub trait PermSensitiveFn {
    /// Tuple length the function expects; `None` accepts any length.
    fn arity(&self) -> Option<usize>;

    fn out_dim(&self) -> usize;

    fn eval(&self, tuple: &[&[f64]]) -> Result<Vec<f64>>;
}

/// MLP applied to the concatenation of `arity` element vectors.
#[derive(Clone, Debug)]
pub struct TupleMlp {
    arity: usize,
    elem_dim: usize,
    mlp: Mlp,
}

impl TupleMlp {
    /// `hidden` lists the widths between the concatenated input and the output.
    pub fn init(
        arity: usize,
        elem_dim: usize,
        hidden: &[usize],
        out_dim: usize,
        activation: crate::numerics::Activation,
        rng: &mut Rng,
    ) -> Result<Self> {
        if arity == 0 || elem_dim == 0 {
            return Err(Error::config("tuple arity and element dimension must be positive"));
        }
        let mut widths = vec![arity * elem_dim];
        widths.extend_from_slice(hidden);
        widths.push(out_dim);
        let mlp = Mlp::init(&MlpSpec::new(widths, activation), rng)?;
        Ok(TupleMlp {
            arity,
            elem_dim,
            mlp,
        })
    }
}

impl PermSensitiveFn for TupleMlp {
    fn arity(&self) -> Option<usize> {
        Some(self.arity)
    }

    fn out_dim(&self) -> usize {
        self.mlp.spec.output_width()
    }

    fn eval(&self, tuple: &[&[f64]]) -> Result<Vec<f64>> {
        if tuple.len() != self.arity || tuple.iter().any(|t| t.len() != self.elem_dim) {
            return Err(Error::Shape {
                op: "TupleMlp::eval",
                left: (tuple.len(), tuple.first().map_or(0, |t| t.len())),
                right: (self.arity, self.elem_dim),
            });
        }
        let x = Matrix::new(1, self.arity * self.elem_dim, tuple.concat())?;
        Ok(self.mlp.forward(&x)?.0.into_data())
    }
}

/// Adapts a closure. The closure sees the tuple and returns a vector of
/// length `out_dim`.
pub struct FnTuple<F> {
    arity: Option<usize>,
    out_dim: usize,
    f: F,
}

impl<F: Fn(&[&[f64]]) -> Vec<f64>> FnTuple<F> {
    pub fn new(arity: Option<usize>, out_dim: usize, f: F) -> Self {
        FnTuple { arity, out_dim, f }
    }
}

impl<F: Fn(&[&[f64]]) -> Vec<f64>> PermSensitiveFn for FnTuple<F> {
    fn arity(&self) -> Option<usize> {
        self.arity
    }

    fn out_dim(&self) -> usize {
        self.out_dim
    }

    fn eval(&self, tuple: &[&[f64]]) -> Result<Vec<f64>> {
        let out = (self.f)(tuple);
        if out.len() != self.out_dim {
            return Err(Error::Contract(format!(
                "tuple function returned {} values, declared {}",
                out.len(),
                self.out_dim
            )));
        }
        Ok(out)
    }
}

/// How orderings are chosen.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum JanossyStrategy {
    Full,
    KAry { k: usize },
    Sorted { key_dim: usize },
    Sampled { num: usize, seed: u64 },
}

fn tuple_of<'a>(set: &'a Matrix, order: &[usize]) -> Vec<&'a [f64]> {
    order.iter().map(|&i| set.row(i)).collect()
}

fn check_arity(f: &dyn PermSensitiveFn, len: usize) -> Result<()> {
    match f.arity() {
        Some(a) if a != len => Err(Error::domain(format!(
            "function takes {a}-tuples but {len}-tuples were requested"
        ))),
        _ => Ok(()),
    }
}

/// Averages outputs per dimension with order-fixed pairwise summation.
fn average(
    f: &dyn PermSensitiveFn,
    set: &Matrix,
    orders: impl Iterator<Item = Vec<usize>>,
) -> Result<Vec<f64>> {
    let m = f.out_dim();
    let mut columns: Vec<Vec<f64>> = vec![Vec::new(); m];
    for order in orders {
        let out = f.eval(&tuple_of(set, &order))?;
        for (c, v) in columns.iter_mut().zip(out) {
            c.push(v);
        }
    }
    let count = columns.first().map_or(0, Vec::len);
    if count == 0 {
        return Err(Error::domain("no orderings to average"));
    }
    Ok(columns
        .iter()
        .map(|c| pairwise_sum(c) / count as f64)
        .collect())
}

fn nonempty(set: &Matrix) -> Result<usize> {
    match set.rows() {
        0 => Err(Error::domain("empty set")),
        n => Ok(n),
    }
}

/// Average of `f` over all `|S|!` orderings.
pub fn janossy_full(f: &dyn PermSensitiveFn, set: &Matrix) -> Result<Vec<f64>> {
    let n = nonempty(set)?;
    if n > MAX_FULL_SET {
        return Err(Error::Resource(format!(
            "full Janossy pooling over {n} elements exceeds the limit of {MAX_FULL_SET}"
        )));
    }
    check_arity(f, n)?;
    average(f, set, (0..n).permutations(n))
}

/// Number of ordered `k`-tuples of distinct elements, `n!/(n−k)!`.
pub fn tuple_count(n: usize, k: usize) -> u64 {
    if k > n {
        return 0;
    }
    ((n - k + 1)..=n).fold(1u64, |acc, v| acc.saturating_mul(v as u64))
}

/// Average of `f` over all ordered `k`-tuples of distinct elements.
pub fn janossy_k(f: &dyn PermSensitiveFn, set: &Matrix, k: usize) -> Result<Vec<f64>> {
    let n = nonempty(set)?;
    if k == 0 || k > n {
        return Err(Error::domain(format!("k = {k} is outside 1..={n}")));
    }
    let count = tuple_count(n, k);
    if count > MAX_TUPLES {
        return Err(Error::Resource(format!(
            "{count} ordered {k}-tuples exceed the budget of {MAX_TUPLES}"
        )));
    }
    check_arity(f, k)?;
    average(f, set, (0..n).permutations(k))
}

/// Row order ascending by `key_dim`, then lexicographically, then by index.
pub fn canonical_order(set: &Matrix, key_dim: usize) -> Result<Vec<usize>> {
    if key_dim >= set.cols() {
        return Err(Error::domain(format!(
            "sort key {key_dim} out of range for dimension {}",
            set.cols()
        )));
    }
    let mut idx: Vec<usize> = (0..set.rows()).collect();
    idx.sort_by(|&a, &b| {
        let (ra, rb) = (set.row(a), set.row(b));
        ra[key_dim]
            .total_cmp(&rb[key_dim])
            .then_with(|| {
                ra.iter()
                    .zip(rb)
                    .map(|(x, y)| x.total_cmp(y))
                    .find(|o| *o != Ordering::Equal)
                    .unwrap_or(Ordering::Equal)
            })
            .then(a.cmp(&b))
    });
    Ok(idx)
}

/// `f` on the canonically sorted tuple. A function of fixed arity `k < |S|`
/// sees the first `k` sorted elements.
pub fn janossy_sorted(f: &dyn PermSensitiveFn, set: &Matrix, key_dim: usize) -> Result<Vec<f64>> {
    nonempty(set)?;
    let mut order = canonical_order(set, key_dim)?;
    if let Some(k) = f.arity() {
        if k > order.len() {
            return Err(Error::domain(format!("function takes {k}-tuples, set has {}", order.len())));
        }
        order.truncate(k);
    }
    f.eval(&tuple_of(set, &order))
}

/// Average of `f` over `num` uniformly drawn orderings. A function of fixed
/// arity `k < |S|` sees the first `k` elements of each ordering.
pub fn janossy_sampled(
    f: &dyn PermSensitiveFn,
    set: &Matrix,
    num: usize,
    rng: &mut Rng,
) -> Result<Vec<f64>> {
    let n = nonempty(set)?;
    if num == 0 {
        return Err(Error::domain("need at least one sampled permutation"));
    }
    let k = f.arity().unwrap_or(n);
    if k > n {
        return Err(Error::domain(format!("function takes {k}-tuples, set has {n}")));
    }
    let orders: Vec<Vec<usize>> = (0..num)
        .map(|_| {
            let mut p = rng.permutation(n);
            p.truncate(k);
            p
        })
        .collect();
    average(f, set, orders.into_iter())
}

/// Dispatches on `strategy`.
pub fn pool(f: &dyn PermSensitiveFn, set: &Matrix, strategy: &JanossyStrategy) -> Result<Vec<f64>> {
    match *strategy {
        JanossyStrategy::Full => janossy_full(f, set),
        JanossyStrategy::KAry { k } => janossy_k(f, set, k),
        JanossyStrategy::Sorted { key_dim } => janossy_sorted(f, set, key_dim),
        JanossyStrategy::Sampled { num, seed } => janossy_sampled(f, set, num, &mut Rng::new(seed)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Activation;

    fn first() -> FnTuple<impl Fn(&[&[f64]]) -> Vec<f64>> {
        FnTuple::new(None, 1, |t: &[&[f64]]| vec![t[0][0]])
    }

    fn column(v: &[f64]) -> Matrix {
        Matrix::column(v)
    }

    #[test]
    fn full_of_singleton_is_the_function() {
        let f = first();
        assert_eq!(janossy_full(&f, &column(&[2.5])).unwrap(), vec![2.5]);
    }

    #[test]
    fn leading_projection_averages_to_mean() {
        let f = first();
        let out = janossy_full(&f, &column(&[1.0, 2.0, 6.0])).unwrap();
        assert!((out[0] - 3.0).abs() < 1e-15);
    }

    #[test]
    fn symmetric_integrand_is_unchanged() {
        let f = FnTuple::new(None, 1, |t: &[&[f64]]| vec![t.iter().map(|r| r[0] * r[0]).sum()]);
        let s = column(&[0.3, -1.0, 2.0, 0.7]);
        let direct = f.eval(&tuple_of(&s, &[0, 1, 2, 3])).unwrap();
        let pooled = janossy_full(&f, &s).unwrap();
        assert!((direct[0] - pooled[0]).abs() < 1e-12);
    }

    #[test]
    fn size_and_arity_limits() {
        let f = first();
        assert!(matches!(janossy_full(&f, &Matrix::zeros(9, 1)), Err(Error::Resource(_))));
        assert!(matches!(janossy_k(&f, &Matrix::zeros(3, 1), 4), Err(Error::Domain(_))));
        assert!(matches!(janossy_k(&f, &Matrix::zeros(3, 1), 0), Err(Error::Domain(_))));
        assert!(matches!(janossy_k(&f, &Matrix::zeros(40, 1), 4), Err(Error::Resource(_))));
        assert_eq!(tuple_count(5, 2), 20);
        assert_eq!(tuple_count(6, 6), 720);
    }

    #[test]
    fn k_one_is_mean_of_elementwise_values() {
        let f = FnTuple::new(Some(1), 1, |t: &[&[f64]]| vec![t[0][0].exp()]);
        let v = [0.2, 1.1, -0.4, 0.9];
        let out = janossy_k(&f, &column(&v), 1).unwrap();
        let mean = v.iter().map(|x| x.exp()).sum::<f64>() / 4.0;
        assert!((out[0] - mean).abs() < 1e-14);
    }

    #[test]
    fn k_two_concat_sum_matches_six_pairs() {
        // weight the positions differently so order matters
        let f = FnTuple::new(Some(2), 1, |t: &[&[f64]]| vec![t[0][0] + 10.0 * t[1][0]]);
        let out = janossy_k(&f, &column(&[1.0, 2.0, 4.0]), 2).unwrap();
        let pairs = [(1.0, 2.0), (2.0, 1.0), (1.0, 4.0), (4.0, 1.0), (2.0, 4.0), (4.0, 2.0)];
        let expected = pairs.iter().map(|(a, b)| a + 10.0 * b).sum::<f64>() / 6.0;
        assert!((out[0] - expected).abs() < 1e-12);
    }

    #[test]
    fn k_equal_to_size_matches_full() {
        let mut rng = Rng::new(1);
        let f = TupleMlp::init(4, 2, &[5], 3, Activation::Tanh, &mut rng).unwrap();
        let s = Matrix::new(4, 2, (0..8).map(|_| rng.normal()).collect()).unwrap();
        let a = janossy_k(&f, &s, 4).unwrap();
        let b = janossy_full(&f, &s).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn sorted_is_canonical() {
        let f = FnTuple::new(None, 3, |t: &[&[f64]]| t.iter().map(|r| r[0]).collect());
        let sorted = column(&[1.0, 2.0, 3.0]);
        assert_eq!(janossy_sorted(&f, &sorted, 0).unwrap(), vec![1.0, 2.0, 3.0]);
        let reversed = column(&[3.0, 2.0, 1.0]);
        assert_eq!(janossy_sorted(&f, &reversed, 0).unwrap(), vec![1.0, 2.0, 3.0]);
        assert!(janossy_sorted(&f, &sorted, 1).is_err());
    }

    #[test]
    fn sorted_ties_fall_back_to_other_coordinates() {
        let s = Matrix::from_rows(&[[1.0, 5.0], [1.0, 2.0], [0.0, 9.0]]).unwrap();
        assert_eq!(canonical_order(&s, 0).unwrap(), vec![2, 1, 0]);
    }

    #[test]
    fn sampled_is_deterministic_and_single_draw_is_one_ordering() {
        let mut rng = Rng::new(3);
        let f = TupleMlp::init(3, 1, &[4], 2, Activation::Tanh, &mut rng).unwrap();
        let s = column(&[0.1, 0.5, -0.3]);
        let a = janossy_sampled(&f, &s, 20, &mut Rng::new(11)).unwrap();
        let b = janossy_sampled(&f, &s, 20, &mut Rng::new(11)).unwrap();
        assert_eq!(a, b);
        let one = janossy_sampled(&f, &s, 1, &mut Rng::new(5)).unwrap();
        let order = Rng::new(5).permutation(3);
        assert_eq!(one, f.eval(&tuple_of(&s, &order)).unwrap());
    }

    #[test]
    fn strategy_json_round_trip() {
        for s in [
            JanossyStrategy::Full,
            JanossyStrategy::KAry { k: 2 },
            JanossyStrategy::Sorted { key_dim: 0 },
            JanossyStrategy::Sampled { num: 7, seed: 1 },
        ] {
            let json = serde_json::to_string(&s).unwrap();
            assert_eq!(serde_json::from_str::<JanossyStrategy>(&json).unwrap(), s);
        }
    }
}
