use std::sync::Arc;

use super::*;
use crate::common::{ConstantPolicy, FnPolicy};
use crate::envs::{DoubleIntegratorConfig, DoubleIntegratorEnv, Environment};
use crate::model::OraclePerturbedModel;
use crate::objective::indicator_cost;

fn line(points: usize, lo: f64, hi: f64) -> GridSpec {
    GridSpec::new(vec![AxisSpec::new(lo, hi, points)]).unwrap()
}

fn exact_value(p: &[Vec<f64>], c: &[f64], gamma: f64) -> Vec<f64> {
    let n = c.len();
    let m = nalgebra::DMatrix::from_fn(n, n, |i, j| if i == j { 1.0 } else { 0.0 } - gamma * p[i][j]);
    m.lu()
        .solve(&nalgebra::DVector::from_column_slice(c))
        .unwrap()
        .iter()
        .copied()
        .collect()
}

fn cfg() -> SolverConfig {
    SolverConfig::default()
}

#[test]
fn constant_costs_give_geometric_values() {
    let g = line(11, -1.0, 1.0);
    let q = NoiseQuadrature::point(1);
    let pol = ConstantPolicy(vec![0.0]);
    let zero = solve_value_grid(
        |x, _| vec![0.5 * x[0]],
        1,
        &pol,
        &ImmediateCost::constant(0.0).unwrap(),
        0.99,
        &g,
        &q,
        &cfg(),
    )
    .unwrap();
    assert!(zero.value.values().iter().all(|v| *v == 0.0));
    let one = solve_value_grid(
        |x, _| vec![0.5 * x[0]],
        1,
        &pol,
        &ImmediateCost::constant(1.0).unwrap(),
        0.99,
        &g,
        &q,
        &cfg(),
    )
    .unwrap();
    assert!(one.value.values().iter().all(|v| (v - 100.0).abs() <= 1e-8));
}

#[test]
fn embedded_deterministic_chain_matches_linear_solve() {
    // node s moves to (3 s + 1) mod 9
    let g = line(9, 0.0, 8.0);
    let next = |s: usize| (3 * s + 1) % 9;
    let c: Vec<f64> = (0..9).map(|s| if s % 4 == 0 { 1.0 } else { 0.0 }).collect();
    let cc = c.clone();
    let cost = ImmediateCost::new(
        "table",
        Arc::new(move |x: &[f64]| cc[x[0].round() as usize]),
        0.0,
        1.0,
        1.0,
    )
    .unwrap();
    let sol = solve_value_grid(
        move |x, _| vec![next(x[0].round() as usize) as f64],
        1,
        &ConstantPolicy(vec![0.0]),
        &cost,
        0.95,
        &g,
        &NoiseQuadrature::point(1),
        &cfg(),
    )
    .unwrap();
    let p: Vec<Vec<f64>> = (0..9)
        .map(|s| (0..9).map(|t| if t == next(s) { 1.0 } else { 0.0 }).collect())
        .collect();
    let exact = exact_value(&p, &c, 0.95);
    for (a, b) in sol.value.values().iter().zip(&exact) {
        assert!((a - b).abs() <= 1e-8);
    }
}

#[test]
fn embedded_random_walk_matches_linear_solve() {
    // lazy walk with sticky ends, expressed as a three-point noise rule
    let n = 15;
    let g = line(n, 0.0, (n - 1) as f64);
    let q = NoiseQuadrature::from_points(vec![vec![-1.0], vec![0.0], vec![1.0]], vec![0.3, 0.2, 0.5]).unwrap();
    let cost = ImmediateCost::new(
        "right edge",
        Arc::new(|x: &[f64]| if x[0] > 11.5 { 1.0 } else { 0.0 }),
        0.0,
        1.0,
        1.0,
    )
    .unwrap();
    let sol = solve_value_grid(
        |x, _| x.to_vec(),
        1,
        &ConstantPolicy(vec![0.0]),
        &cost,
        0.9,
        &g,
        &q,
        &cfg(),
    )
    .unwrap();
    let mut p = vec![vec![0.0; n]; n];
    for s in 0..n {
        p[s][s.saturating_sub(1)] += 0.3;
        p[s][s] += 0.2;
        p[s][(s + 1).min(n - 1)] += 0.5;
    }
    let c: Vec<f64> = (0..n).map(|s| if s > 11 { 1.0 } else { 0.0 }).collect();
    let exact = exact_value(&p, &c, 0.9);
    for (a, b) in sol.value.values().iter().zip(&exact) {
        assert!((a - b).abs() <= 1e-8, "{a} vs {b}");
    }
}

fn double_integrator() -> (Arc<DoubleIntegratorEnv>, GridSpec, ImmediateCost) {
    let env = Arc::new(DoubleIntegratorEnv::new(DoubleIntegratorConfig::default()).unwrap());
    let grid = GridSpec::uniform(&[-1.5, -1.5], &[1.5, 1.5], &[31, 31]).unwrap();
    let e = env.clone();
    let cost = indicator_cost(Arc::new(move |x: &[f64]| e.is_safe(x)));
    (env, grid, cost)
}

fn braking() -> FnPolicy<impl Fn(&[f64]) -> Vec<f64> + Send + Sync> {
    FnPolicy(|x: &[f64]| vec![(-1.5 * x[0] - 2.0 * x[1]).clamp(-1.0, 1.0)])
}

#[test]
fn zero_sigma_reproduces_the_known_model_bit_for_bit() {
    let (env, grid, cost) = double_integrator();
    let q = NoiseQuadrature::new(&NoiseModel::gaussian(vec![0.01, 0.01]).unwrap(), 3).unwrap();
    let e = env.clone();
    let plain = solve_value_grid(
        move |x, u| e.mean_step(x, u),
        1,
        &braking(),
        &cost,
        0.95,
        &grid,
        &q,
        &cfg(),
    )
    .unwrap();
    for (sigma, beta) in [(0.0, 2.0), (0.05, 0.0)] {
        let m = OraclePerturbedModel::new(env.clone(), vec![sigma; 2], beta, 0.0).unwrap();
        let pess =
            pessimistic_value_grid(&m, &braking(), &cost, 0.95, &grid, &q, EtaSearch::Vertices3, &cfg()).unwrap();
        assert_eq!(pess.value.values(), plain.value.values());
    }
}

#[test]
fn pessimism_dominates_and_grows_with_beta() {
    let (env, grid, cost) = double_integrator();
    let q = NoiseQuadrature::point(2);
    let e = env.clone();
    let plain = solve_value_grid(
        move |x, u| e.mean_step(x, u),
        1,
        &braking(),
        &cost,
        0.95,
        &grid,
        &q,
        &cfg(),
    )
    .unwrap();
    let mut prev = plain.value.values().to_vec();
    for beta in [0.5, 1.0, 2.0] {
        let m = OraclePerturbedModel::new(env.clone(), vec![0.01, 0.02], beta, 0.0).unwrap();
        let pess =
            pessimistic_value_grid(&m, &braking(), &cost, 0.95, &grid, &q, EtaSearch::Vertices3, &cfg()).unwrap();
        for (a, b) in pess.value.values().iter().zip(&prev) {
            assert!(*a >= b - 1e-8);
        }
        prev = pess.value.values().to_vec();
    }
}

#[test]
fn monotone_value_is_maximized_at_the_upper_vertex() {
    // x' = 0.9 x + 0.05 eta, cost increasing in x
    let g = line(41, -1.0, 1.0);
    let q = NoiseQuadrature::point(1);
    let cost = ImmediateCost::new("ramp", Arc::new(|x: &[f64]| (x[0] + 1.0) / 2.0), 0.0, 1.0, 1.0).unwrap();
    struct Toy;
    impl CalibratedModel for Toy {
        fn state_dim(&self) -> usize {
            1
        }
        fn action_dim(&self) -> usize {
            1
        }
        fn predict(&self, x: &[f64], _u: &[f64]) -> Prediction {
            Prediction {
                mean: vec![0.9 * x[0]],
                std: vec![0.05],
                out_of_range: false,
            }
        }
        fn beta(&self) -> f64 {
            1.0
        }
    }
    let pol = ConstantPolicy(vec![0.0]);
    let pess = pessimistic_value_grid(&Toy, &pol, &cost, 0.9, &g, &q, EtaSearch::Vertices3, &cfg()).unwrap();
    let up = solve_value_grid(|x, _| vec![0.9 * x[0] + 0.05], 1, &pol, &cost, 0.9, &g, &q, &cfg()).unwrap();
    for (a, b) in pess.value.values().iter().zip(up.value.values()) {
        assert!((a - b).abs() <= 1e-8);
    }
    // interior nodes whose image is not clamped pick eta = +1
    for n in 0..40 {
        assert_eq!(pess.eta_points[pess.eta_index[n]], vec![1.0], "node {n}");
    }
}

#[test]
fn fixed_eta_monte_carlo_matches_and_never_exceeds_the_grid_value() {
    let (env, grid, cost) = double_integrator();
    let m = OraclePerturbedModel::new(env.clone(), vec![0.005, 0.01], 1.0, 0.0).unwrap();
    let q = NoiseQuadrature::point(2);
    let pess = pessimistic_value_grid(&m, &braking(), &cost, 0.95, &grid, &q, EtaSearch::Vertices3, &cfg()).unwrap();
    let noise = NoiseModel::zero(2);
    let rng = RandomSource::new(3, 0);
    for x0 in [[0.0, 0.0], [0.5, 0.6], [-0.4, -0.9]] {
        let est = mc_pessimistic_value(&m, &braking(), |x| pess.eta_at(x), &noise, &cost, 0.95, &x0, 4, &rng).unwrap();
        let grid_v = pess.value.eval(&x0);
        // interpolation error for an indicator cost is up to one unit at the boundary
        assert!(
            est.mean <= grid_v + 3.0 * est.std_error + 1.0,
            "{} vs {}",
            est.mean,
            grid_v
        );
        let zero = mc_pessimistic_value(&m, &braking(), |_| vec![0.0, 0.0], &noise, &cost, 0.95, &x0, 4, &rng).unwrap();
        assert!(zero.mean <= grid_v + 1e-9 + 1.0);
    }
    let bad = mc_pessimistic_value(
        &m,
        &braking(),
        |_| vec![2.0, 0.0],
        &noise,
        &cost,
        0.95,
        &[0.0, 0.0],
        1,
        &rng,
    );
    assert!(bad.is_err());
}

#[test]
fn zero_sigma_monte_carlo_is_the_nominal_estimate() {
    let (env, _, cost) = double_integrator();
    let env_noisy = Arc::new(
        DoubleIntegratorEnv::new(DoubleIntegratorConfig::default())
            .unwrap()
            .with_noise(NoiseModel::gaussian(vec![0.02, 0.02]).unwrap())
            .unwrap(),
    );
    let m = OraclePerturbedModel::new(env.clone(), vec![0.0, 0.0], 1.0, 0.0).unwrap();
    let rng = RandomSource::new(9, 0);
    let noise = env_noisy.noise().clone();
    let a = mc_pessimistic_value(
        &m,
        &braking(),
        |_| vec![0.0, 0.0],
        &noise,
        &cost,
        0.9,
        &[0.8, 0.3],
        64,
        &rng,
    )
    .unwrap();
    let b = cumulative_cost_mc(
        |x: &[f64], u: &[f64], r: &mut RandomSource| {
            let w = noise.sample(r);
            Ok(env.mean_step(x, u).iter().zip(&w).map(|(a, b)| a + b).collect())
        },
        |x: &[f64], r: &mut RandomSource| Ok(braking().act(x, r)),
        &cost,
        0.9,
        &[0.8, 0.3],
        64,
        &rng,
    )
    .unwrap();
    assert_eq!(a, b);
}

fn contraction_toy(sigma: f64) -> (impl CalibratedModel, ImmediateCost, GridSpec) {
    struct Toy(f64);
    impl CalibratedModel for Toy {
        fn state_dim(&self) -> usize {
            1
        }
        fn action_dim(&self) -> usize {
            1
        }
        fn predict(&self, x: &[f64], _u: &[f64]) -> Prediction {
            Prediction {
                mean: vec![0.5 * x[0]],
                std: vec![self.0],
                out_of_range: false,
            }
        }
        fn beta(&self) -> f64 {
            1.0
        }
    }
    let cost = ImmediateCost::new("abs", Arc::new(|x: &[f64]| x[0].abs().min(1.0)), 0.0, 1.0, 1.0).unwrap();
    (Toy(sigma), cost, line(41, -1.0, 1.0))
}

#[test]
fn drift_holds_for_a_contraction() {
    let (m, cost, g) = contraction_toy(0.0);
    let q = NoiseQuadrature::point(1);
    let pol = ConstantPolicy(vec![0.0]);
    let sol = pessimistic_value_grid(&m, &pol, &cost, 0.9, &g, &q, EtaSearch::Vertices3, &cfg()).unwrap();
    let r = check_drift(
        &sol.value,
        &m,
        &pol,
        &|x| x[0].abs() <= 1.0,
        0.0,
        &q,
        &DriftOptions::default(),
    )
    .unwrap();
    assert!(r.holds, "{r:?}");
    let l = r.lambda_max.unwrap();
    assert!(l > 0.0 && l <= 1.0);
    assert_eq!(r.floor_nodes, 1);
    // direct evaluation at one node: V(x) = |x| / (1 - 0.45) away from clamping
    let v = sol.value.eval(&[0.5]);
    assert!((v - 0.5 / 0.55).abs() < 1e-6, "{v}");
}

#[test]
fn drift_fails_when_uncertainty_dominates() {
    let (m, cost, g) = contraction_toy(1.0);
    let q = NoiseQuadrature::point(1);
    let pol = ConstantPolicy(vec![0.0]);
    let sol = pessimistic_value_grid(&m, &pol, &cost, 0.9, &g, &q, EtaSearch::Vertices3, &cfg()).unwrap();
    let r = check_drift(
        &sol.value,
        &m,
        &pol,
        &|x| x[0].abs() <= 1.0,
        0.0,
        &q,
        &DriftOptions::default(),
    )
    .unwrap();
    assert!(!r.holds);
}

#[test]
fn zero_value_is_degenerate_but_holds() {
    let (m, _, g) = contraction_toy(0.0);
    let q = NoiseQuadrature::point(1);
    let pol = ConstantPolicy(vec![0.0]);
    let v = GridValueFunction::new(g.clone(), vec![0.0; g.len()]).unwrap();
    let r = check_drift(&v, &m, &pol, &|_| true, 0.0, &q, &DriftOptions::default()).unwrap();
    assert!(r.holds);
    assert_eq!(r.lambda_max, None);
    assert_eq!(r.floor_nodes, g.len());
    assert!(check_drift(&v, &m, &pol, &|_| false, 0.0, &q, &DriftOptions::default()).is_err());
}

#[test]
fn certify_checks_hypotheses() {
    let (m, cost, g) = contraction_toy(0.0);
    let q = NoiseQuadrature::point(1);
    let pol = ConstantPolicy(vec![0.0]);
    let sol = pessimistic_value_grid(&m, &pol, &cost, 0.9, &g, &q, EtaSearch::Vertices3, &cfg()).unwrap();
    let drift = check_drift(&sol.value, &m, &pol, &|_| true, 0.0, &q, &DriftOptions::default()).unwrap();
    let obj = SafetyObjective::new(indicator_cost(Arc::new(|x: &[f64]| x[0].abs() <= 1.0)), 0.9, Some(0.5)).unwrap();
    let ci = certify_policy(&sol.value, &obj, &drift).unwrap();
    assert_eq!((ci.xi, ci.xi_bar, ci.v_min), (0.5, 1.0, 0.0));
    assert!(CertInput::new(0.1, 1.0, 1.0, 0.0, 10.0, 0.0).is_err());
    assert!(CertInput::new(0.1, 0.5, 1.0, 0.0, 10.0, 0.0).is_ok());
    let mut failed = drift.clone();
    failed.holds = false;
    assert!(certify_policy(&sol.value, &obj, &failed).is_err());
    let mut narrow = drift;
    narrow.region = DriftRegion::SubLevel(0.5);
    assert!(certify_policy(&sol.value, &obj, &narrow).is_err());
}
