use powerpool::aggregators::{
    aggregate, aggregate_backward, geometric_expansion, isomorphic_sum, power_mean, quasi_arithmetic_mean,
    weighted_power_mean, AggregatorSpec, MonotoneMap,
};
use powerpool::numerics::{Matrix, Rng};
use proptest::prelude::*;

/// Textbook power mean, valid away from p = 0 for modest magnitudes.
fn direct_power_mean(x: &[f64], p: f64) -> f64 {
    let n = x.len() as f64;
    (x.iter().map(|v| v.powf(p)).sum::<f64>() / n).powf(1.0 / p)
}

fn positive_vec(rng: &mut Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.uniform_range(0.05, 5.0)).collect()
}

#[test]
fn matches_the_textbook_formula_away_from_zero() {
    let mut rng = Rng::new(11);
    for _ in 0..200 {
        let n = 1 + rng.below(9);
        let x = positive_vec(&mut rng, n);
        for p in [-7.5, -3.0, -1.0, -0.3, 0.2, 0.5, 1.0, 2.0, 3.7, 9.0] {
            let got = power_mean(&x, p).unwrap();
            let want = direct_power_mean(&x, p);
            assert!((got - want).abs() <= 1e-12 * want, "p={p} x={x:?}: {got} vs {want}");
        }
    }
}

#[test]
fn strictly_increasing_in_p_on_non_constant_vectors() {
    let ps = [-8.0, -4.0, -1.0, 0.0, 1.0, 2.0, 4.0, 8.0];
    let mut rng = Rng::new(3);
    for _ in 0..100 {
        let n = 2 + rng.below(7);
        let x = positive_vec(&mut rng, n);
        let m: Vec<f64> = ps.iter().map(|&p| power_mean(&x, p).unwrap()).collect();
        assert!(m.windows(2).all(|w| w[0] < w[1]), "{x:?} -> {m:?}");
    }
}

#[test]
fn large_p_approaches_max_within_the_n_root_bound() {
    let x = [1.0, 5.0, 3.0];
    let m = power_mean(&x, 200.0).unwrap();
    assert!((m - 5.0).abs() / 5.0 < 1e-2);
    // max · n^(−1/p) ≤ M_p ≤ max
    assert!(m <= 5.0 && m >= 5.0 * 3f64.powf(-1.0 / 200.0) - 1e-12);
    let lo = power_mean(&x, -200.0).unwrap();
    assert!(lo >= 1.0 && lo <= 1.0 * 3f64.powf(1.0 / 200.0) + 1e-12);
}

#[test]
fn tiny_p_agrees_with_the_geometric_branch() {
    let mut rng = Rng::new(5);
    for _ in 0..100 {
        let n = 1 + rng.below(8);
        let x = positive_vec(&mut rng, n);
        let g = geometric_expansion(&x, 0.0).unwrap();
        let ln_mean = x.iter().map(|v| v.ln()).sum::<f64>() / x.len() as f64;
        assert!((g - ln_mean.exp()).abs() <= 1e-12 * g);
        for p in [-1e-3, 1e-3] {
            let m = power_mean(&x, p).unwrap();
            assert!((m - geometric_expansion(&x, p).unwrap()).abs() <= 1e-5 * m);
        }
    }
}

#[test]
fn classical_special_cases() {
    assert!((power_mean(&[1.0, 4.0, 4.0], -1.0).unwrap() - 2.0).abs() < 1e-14);
    assert!((power_mean(&[1.0, 4.0, 16.0], 0.0).unwrap() - 4.0).abs() < 1e-14);
    assert!((power_mean(&[1.0, 2.0, 4.0], 2.0).unwrap() - 7f64.sqrt()).abs() < 1e-14);
}

#[test]
fn weighted_reductions() {
    let mut rng = Rng::new(8);
    for _ in 0..50 {
        let n = 1 + rng.below(6);
        let x = positive_vec(&mut rng, n);
        let p = rng.uniform_range(-4.0, 4.0);
        let uniform = vec![1.0 / n as f64; n];
        let w = weighted_power_mean(&x, &uniform, p).unwrap();
        assert!((w - power_mean(&x, p).unwrap()).abs() <= 1e-12 * w);
        let j = rng.below(n);
        let mut one_hot = vec![0.0; n];
        one_hot[j] = 1.0;
        assert_eq!(weighted_power_mean(&x, &one_hot, p).unwrap(), x[j]);
    }
    assert!((weighted_power_mean(&[2.0, 2.0], &[0.25, 0.75], 3.0).unwrap() - 2.0).abs() < 1e-15);
}

#[test]
fn quasi_arithmetic_inverse_round_trip() {
    let mut rng = Rng::new(21);
    for g in [MonotoneMap::Identity, MonotoneMap::Ln, MonotoneMap::Exp, MonotoneMap::Power { q: 2.5 }] {
        for _ in 0..1000 {
            let y = rng.uniform_range(0.1, 4.0);
            let back = g.apply(g.inverse(y));
            assert!((back - y).abs() <= 1e-10 * y.abs().max(1.0), "{g:?} {y} -> {back}");
        }
    }
}

#[test]
fn sum_isomorphism_direct_formulas() {
    assert_eq!(isomorphic_sum(&[2.0, 4.5], MonotoneMap::Identity).unwrap(), 6.5);
    let lse = isomorphic_sum(&[0.5, 1.5], MonotoneMap::Ln).unwrap();
    assert!((lse - (0.5f64.exp() + 1.5f64.exp()).ln()).abs() < 1e-14);
    assert!((quasi_arithmetic_mean(&[2.0, 4.0], MonotoneMap::Identity).unwrap() - 3.0).abs() < 1e-15);
}

#[test]
fn power_mean_gradient_against_finite_differences() {
    let mut rng = Rng::new(17);
    for _ in 0..20 {
        let (rows, cols) = (1 + rng.below(5), 1 + rng.below(3));
        let data: Vec<f64> = (0..rows * cols).map(|_| rng.uniform_range(0.2, 3.0)).collect();
        let emb = Matrix::new(rows, cols, data).unwrap();
        let mask = vec![true; rows];
        let p = rng.uniform_range(-3.0, 3.0);
        let up: Vec<f64> = (0..cols).map(|_| rng.normal()).collect();
        let objective = |e: &Matrix, p: f64| -> f64 {
            let v = aggregate(e, &mask, &AggregatorSpec::learnable_power_mean(p)).unwrap();
            v.iter().zip(&up).map(|(a, b)| a * b).sum()
        };
        let g = aggregate_backward(&emb, &mask, &AggregatorSpec::learnable_power_mean(p), &up).unwrap();
        let h = 1e-6;
        for r in 0..rows {
            for c in 0..cols {
                let (mut a, mut b) = (emb.clone(), emb.clone());
                a.set(r, c, emb.get(r, c) + h);
                b.set(r, c, emb.get(r, c) - h);
                let fd = (objective(&a, p) - objective(&b, p)) / (2.0 * h);
                let an = g.emb.get(r, c);
                assert!((fd - an).abs() <= 1e-6 * fd.abs().max(an.abs()).max(1e-3), "{fd} vs {an}");
            }
        }
        let fd = (objective(&emb, p + h) - objective(&emb, p - h)) / (2.0 * h);
        let an = g.p.unwrap();
        assert!((fd - an).abs() <= 1e-6 * fd.abs().max(an.abs()).max(1e-3), "dp {fd} vs {an}");
    }
}

proptest! {
    #[test]
    fn power_mean_lies_between_min_and_max(
        x in prop::collection::vec(0.01f64..100.0, 1..12),
        p in -20.0f64..20.0,
    ) {
        let m = power_mean(&x, p).unwrap();
        let lo = x.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(m >= lo * (1.0 - 1e-12) && m <= hi * (1.0 + 1e-12));
    }

    #[test]
    fn power_mean_is_homogeneous(
        x in prop::collection::vec(0.01f64..10.0, 1..8),
        p in -6.0f64..6.0,
        c in 0.1f64..10.0,
    ) {
        let scaled: Vec<f64> = x.iter().map(|v| v * c).collect();
        let a = power_mean(&scaled, p).unwrap();
        let b = c * power_mean(&x, p).unwrap();
        prop_assert!((a - b).abs() <= 1e-11 * b);
    }

    #[test]
    fn quasi_power_equals_power_mean(
        x in prop::collection::vec(0.05f64..10.0, 1..8),
        q in prop_oneof![-5.0f64..-0.1, 0.1f64..5.0],
    ) {
        let a = quasi_arithmetic_mean(&x, MonotoneMap::Power { q }).unwrap();
        let b = power_mean(&x, q).unwrap();
        prop_assert!((a - b).abs() <= 1e-10 * b);
    }
}
