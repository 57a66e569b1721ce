use super::*;
use crate::envs::DiscreteChainMDP;
use proptest::prelude::*;

fn pitch_safe() -> SafeFn {
    Arc::new(|x: &[f64]| x[2] <= 0.0)
}

#[test]
fn indicator_values_and_bounds() {
    let c = indicator_cost(pitch_safe());
    assert_eq!(c.eval(&[0.0, 0.0, -0.2]), 0.0);
    assert_eq!(c.eval(&[0.0, 0.0, 0.01]), 1.0);
    assert_eq!((c.c_lower(), c.c_upper(), c.c_hat()), (0.0, 1.0, 1.0));
}

#[test]
fn margin_cost_shape() {
    let c = margin_cost(Arc::new(|x: &[f64]| x[0]), 20.0).unwrap();
    assert!(c.eval(&[-1.0]) < 0.01);
    assert_eq!(c.eval(&[0.0]), 0.5);
    assert!(c.eval(&[1.0]) > 0.99);
    assert!(margin_cost(Arc::new(|x: &[f64]| x[0]), 0.0).is_err());
    assert!(margin_cost(Arc::new(|x: &[f64]| x[0]), -1.0).is_err());
    let grid: Vec<Vec<f64>> = (0..=2000).map(|i| vec![-1.0 + i as f64 * 1e-3]).collect();
    assert!(c.verify(grid.iter().map(Vec::as_slice), &|x| x[0] <= 0.0).is_ok());
}

#[test]
fn ellipsoid_c_hat_is_the_value_at_the_nearest_unsafe_point() {
    // unit circle metric, constraint x1 <= 1, center at origin
    let c = ellipsoidal_cost(vec![0.0, 0.0], linalg::identity(2), 0.5, 1.0, vec![0.0, 1.0], 1.0).unwrap();
    assert!((c.c_hat() - 0.5).abs() < 1e-12);
    assert_eq!(c.eval(&[0.1, 0.1]), 0.0);
    assert!((c.eval(&[0.0, 1.0]) - 0.5).abs() < 1e-12);
    let grid: Vec<Vec<f64>> = (0..=80)
        .flat_map(|i| (0..=80).map(move |j| vec![-2.0 + 0.05 * i as f64, -2.0 + 0.05 * j as f64]))
        .collect();
    assert!(c.verify(grid.iter().map(Vec::as_slice), &|x| x[1] <= 1.0).is_ok());
    assert!(ellipsoidal_cost(vec![0.0, 2.0], linalg::identity(2), 0.5, 1.0, vec![0.0, 1.0], 1.0).is_err());
}

#[test]
fn threshold_examples() {
    let obj = SafetyObjective::new(indicator_cost(pitch_safe()), 0.99, None).unwrap();
    assert_eq!(obj.xi_bar(), 1.0);
    assert_eq!(obj.xi(), 0.5);
    assert_eq!(safe_threshold(0.99, 0.0, 0.0), 0.0);
    let c = ImmediateCost::new("shifted", Arc::new(|_| -1.0), -1.0, 1.0, 1.0).unwrap();
    let obj = SafetyObjective::new(c.clone(), 0.5, Some(-0.5)).unwrap();
    assert_eq!(obj.c_min_bound(), -2.0);
    assert_eq!(obj.xi_bar(), 0.0);
    assert!(SafetyObjective::new(c, 0.5, None).is_err());
}

#[test]
fn xi_must_stay_below_xi_bar() {
    let c = indicator_cost(pitch_safe());
    assert!(SafetyObjective::new(c.clone(), 0.99, Some(1.0)).is_err());
    assert!(SafetyObjective::new(c.clone(), 0.99, Some(0.999)).is_ok());
    assert!(SafetyObjective::with_bound(c, 0.99, -0.1, None).is_err());
}

proptest! {
    #[test]
    fn threshold_is_monotone(g in 0.01f64..0.99, cmin in -10.0f64..10.0, chat in -5.0f64..5.0, dc in 0.0f64..3.0, dh in 0.0f64..3.0) {
        let base = safe_threshold(g, cmin, chat);
        prop_assert!(safe_threshold(g, cmin + dc, chat) >= base);
        prop_assert!(safe_threshold(g, cmin, chat + dh) >= base);
    }

    #[test]
    fn margin_cost_bounds_hold(slope in 0.1f64..100.0, d in -5.0f64..5.0) {
        let c = margin_cost(Arc::new(|x: &[f64]| x[0]), slope).unwrap();
        let v = c.eval(&[d]);
        prop_assert!((0.0..=1.0).contains(&v));
        if d >= 0.0 {
            prop_assert!(v >= c.c_hat());
        }
    }
}

fn chain_step(chain: &DiscreteChainMDP) -> impl Fn(&[f64], &[f64], &mut RandomSource) -> Result<Vec<f64>> + Sync + '_ {
    move |x, u, r| Ok(vec![chain.step(x[0] as usize, u[0] as usize, r) as f64])
}

#[test]
fn zero_cost_estimate_is_exactly_zero() {
    let chain =
        DiscreteChainMDP::random(4, 1, 2, vec![false, true, false, false], &mut RandomSource::new(0, 0)).unwrap();
    let cost = ImmediateCost::constant(0.0).unwrap();
    let est = cumulative_cost_mc(
        chain_step(&chain),
        |_, _| Ok(vec![0.0]),
        &cost,
        0.9,
        &[0.0],
        50,
        &RandomSource::new(1, 0),
    )
    .unwrap();
    assert_eq!((est.mean, est.std_error), (0.0, 0.0));
}

#[test]
fn single_unsafe_visit_costs_gamma() {
    // 0 -> 1 (unsafe) -> 2 (absorbing safe)
    let t = vec![vec![vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0], vec![0.0, 0.0, 1.0]]];
    let chain = DiscreteChainMDP::new(t, vec![false, true, false]).unwrap();
    let cost = indicator_cost(Arc::new(|x: &[f64]| x[0] != 1.0));
    let est = cumulative_cost_mc(
        chain_step(&chain),
        |_, _| Ok(vec![0.0]),
        &cost,
        0.99,
        &[0.0],
        10,
        &RandomSource::new(2, 0),
    )
    .unwrap();
    assert!((est.mean - 0.99).abs() < 1e-12);
}

/// `(I - gamma P) V = c` solved densely.
fn exact_value(p: &[Vec<f64>], c: &[f64], gamma: f64) -> Vec<f64> {
    let n = c.len();
    let m = nalgebra::DMatrix::from_fn(n, n, |i, j| if i == j { 1.0 } else { 0.0 } - gamma * p[i][j]);
    let b = nalgebra::DVector::from_column_slice(c);
    m.lu().solve(&b).unwrap().iter().copied().collect()
}

#[test]
fn chain_estimate_is_within_three_standard_errors() {
    let mut within = 0;
    let runs = 20;
    for seed in 0..runs {
        let mut rng = RandomSource::new(100 + seed, 0);
        let chain = DiscreteChainMDP::random(6, 1, 3, vec![false, false, true, false, true, false], &mut rng).unwrap();
        let unsafe_states = chain.unsafe_states().to_vec();
        let cost = indicator_cost(Arc::new(move |x: &[f64]| !unsafe_states[x[0] as usize]));
        let c: Vec<f64> = (0..6).map(|s| cost.eval(&[s as f64])).collect();
        let gamma = 0.9;
        let exact = exact_value(&chain.policy_matrix(&[0; 6]), &c, gamma);
        let est = cumulative_cost_mc(
            chain_step(&chain),
            |_, _| Ok(vec![0.0]),
            &cost,
            gamma,
            &[0.0],
            2000,
            &RandomSource::new(seed, 7),
        )
        .unwrap();
        if (est.mean - exact[0]).abs() <= 3.0 * est.std_error + 1e-6 {
            within += 1;
        }
    }
    // three-sigma coverage is 99.7%; allow one miss in twenty
    assert!(within >= runs - 1, "{within}/{runs}");
}
