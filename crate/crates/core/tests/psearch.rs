use powerpool::aggregators::AggregatorSpec;
use powerpool::numerics::{Activation, Matrix, Rng};
use powerpool::psearch::{
    bayes_search, gradient_search, grid_points, grid_search, Direction, SearchConfig, Strategy,
};
use powerpool::setnn::{init_model, MlpSpec, SetBatch, Targets};
use powerpool::training::{Optimizer, TrainConfig};

fn grid(step: f64, range: [f64; 2], direction: Direction) -> SearchConfig {
    SearchConfig {
        strategy: Strategy::Grid { step },
        range,
        direction,
        ..SearchConfig::default()
    }
}

fn bayes(trials: usize) -> SearchConfig {
    SearchConfig {
        strategy: Strategy::Bayes { trials, init_points: 5 },
        range: [-10.0, 10.0],
        direction: Direction::Maximize,
        ..SearchConfig::default()
    }
}

#[test]
fn grid_hits_an_optimum_on_a_grid_point() {
    let r = grid_search(|p| Ok(-(p - 2.0) * (p - 2.0)), &grid(0.5, [-10.0, 10.0], Direction::Maximize)).unwrap();
    assert_eq!(r.best_p, 2.0);
    assert_eq!(r.history.len(), 41);
    let r = grid_search(|p| Ok((p - 2.0) * (p - 2.0)), &grid(0.5, [-10.0, 10.0], Direction::Minimize)).unwrap();
    assert_eq!(r.best_p, 2.0);
}

#[test]
fn grid_counts_and_history_order() {
    let pts = grid_points([-5.0, 5.0], 0.5).unwrap();
    assert_eq!(pts.len(), 21);
    assert_eq!((pts[0], pts[20]), (-5.0, 5.0));
    let r = grid_search(|p| Ok(p.sin()), &grid(0.5, [-5.0, 5.0], Direction::Minimize)).unwrap();
    let ps: Vec<f64> = r.history.iter().map(|t| t.p).collect();
    assert_eq!(ps, pts);
    assert!(r.history.iter().all(|t| t.wall_seconds.is_none()));
}

#[test]
fn flat_objectives_pick_the_smallest_p() {
    let r = grid_search(|_| Ok(1.0), &grid(0.5, [-3.0, 3.0], Direction::Minimize)).unwrap();
    assert_eq!(r.best_p, -3.0);
    let r = bayes_search(|_| Ok(0.0), &bayes(12)).unwrap();
    assert_eq!(r.best_p, -10.0);
    assert_eq!(r.history.len(), 12);
}

#[test]
fn bayes_locates_a_smooth_optimum() {
    let mut calls = 0;
    let r = bayes_search(
        |p| {
            calls += 1;
            Ok(-(p - 3.3) * (p - 3.3))
        },
        &bayes(30),
    )
    .unwrap();
    assert_eq!(calls, 30);
    assert_eq!(r.history.len(), 30);
    assert!((r.best_p - 3.3).abs() <= 0.25, "best p {}", r.best_p);
    assert_eq!(r, bayes_search(|p| Ok(-(p - 3.3) * (p - 3.3)), &bayes(30)).unwrap());
}

#[test]
fn objective_errors_propagate() {
    let err = grid_search(|_| Err(powerpool::Error::Numerical("boom".into())), &SearchConfig::default()).unwrap_err();
    assert!(matches!(err, powerpool::Error::Numerical(_)));
}

fn mean_task(rng: &mut Rng, n: usize) -> SetBatch {
    let sets: Vec<Matrix> = (0..n)
        .map(|_| {
            let m = 3 + rng.below(6);
            Matrix::new(m, 1, (0..m).map(|_| rng.uniform_range(0.0, 1.0)).collect()).unwrap()
        })
        .collect();
    let y = sets.iter().map(|s| s.data().iter().sum::<f64>() / s.rows() as f64).collect();
    SetBatch::from_sets(&sets, Targets::Values(y)).unwrap()
}

#[test]
fn joint_search_keeps_p_near_one_on_the_mean_task() {
    let mut rng = Rng::new(1);
    let train = mean_task(&mut rng, 300);
    let val = mean_task(&mut rng, 100);
    let phi = MlpSpec::new(vec![1, 16, 8], Activation::Tanh).with_positive_output(true);
    let rho = MlpSpec::new(vec![8, 16, 1], Activation::Tanh);
    let model = init_model(&phi, &AggregatorSpec::learnable_power_mean(1.0), &rho, &mut rng).unwrap();
    let tc = TrainConfig {
        epochs: 30,
        batch_size: 16,
        optimizer: Optimizer::adam(3e-3),
        ..TrainConfig::default()
    };
    let sc = SearchConfig {
        strategy: Strategy::GradientJoint,
        range: [-5.0, 5.0],
        ..SearchConfig::default()
    };
    let (r, trained) = gradient_search(model, &train, Some(&val), &tc, &sc).unwrap();
    assert_eq!(r.history.len(), 30);
    assert!(r.history.iter().all(|t| (-5.0..=5.0).contains(&t.p)));
    assert!((r.best_p - 1.0).abs() < 0.5, "p {}", r.best_p);
    assert_eq!(trained.unwrap().agg.p(), Some(r.best_p));
}

#[test]
fn joint_search_rejects_a_fixed_exponent() {
    let mut rng = Rng::new(2);
    let train = mean_task(&mut rng, 10);
    let phi = MlpSpec::new(vec![1, 4], Activation::Tanh).with_positive_output(true);
    let model = init_model(&phi, &AggregatorSpec::power_mean(1.0), &MlpSpec::identity(4), &mut rng).unwrap();
    let sc = SearchConfig {
        strategy: Strategy::GradientJoint,
        ..SearchConfig::default()
    };
    assert!(gradient_search(model, &train, None, &TrainConfig::default(), &sc).is_err());
}

#[test]
fn invalid_ranges_are_config_errors() {
    for cfg in [grid(0.5, [3.0, 1.0], Direction::Minimize), grid(0.0, [0.0, 1.0], Direction::Minimize)] {
        assert!(matches!(grid_search(|_| Ok(0.0), &cfg), Err(powerpool::Error::Config(_))));
    }
}
