use std::sync::Arc;

use proptest::prelude::*;

use super::*;
use crate::common::{ConstantPolicy, FnPolicy};
use crate::envs::{DoubleIntegratorConfig, DoubleIntegratorEnv};
use crate::model::{KnownModel, Prediction};
use crate::objective::indicator_cost;
use crate::value::GridSpec;

type Shift = KnownModel<fn(&[f64], &[f64]) -> Vec<f64>>;

fn shift_model() -> Shift {
    fn f(x: &[f64], u: &[f64]) -> Vec<f64> {
        vec![x[0] + u[0]]
    }
    KnownModel::new(1, 1, f as fn(&[f64], &[f64]) -> Vec<f64>)
}

fn parabola() -> GridValueFunction {
    let grid = GridSpec::uniform(&[-3.0], &[3.0], &[6001]).unwrap();
    GridValueFunction::from_fn(grid, |x| x[0] * x[0]).unwrap()
}

fn config(xi: f64) -> FilterConfig {
    FilterConfig {
        xi,
        ..FilterConfig::default()
    }
}

/// Mean `x + u`, unit spread on every output, large `beta`.
struct Wide(f64);

impl CalibratedModel for Wide {
    fn state_dim(&self) -> usize {
        1
    }
    fn action_dim(&self) -> usize {
        1
    }
    fn predict(&self, x: &[f64], u: &[f64]) -> Prediction {
        Prediction {
            mean: vec![x[0] + u[0]],
            std: vec![1.0],
            out_of_range: false,
        }
    }
    fn beta(&self) -> f64 {
        self.0
    }
}

fn exhaustive(x: f64, u_nom: f64, xi: f64, vp: &GridValueFunction) -> Option<f64> {
    let n = 200_001;
    (0..n)
        .map(|i| -1.0 + 2.0 * i as f64 / (n - 1) as f64)
        .filter(|u| vp.eval(&[x + u]) <= xi)
        .min_by(|a, b| (a - u_nom).abs().total_cmp(&(b - u_nom).abs()))
}

#[test]
fn admissible_nominal_is_returned_exactly() {
    let model = shift_model();
    let vp = parabola();
    let quad = NoiseQuadrature::point(1);
    let f = SafetyFilter::new(&model, &vp, &quad, Bounds::unit(1), config(0.25)).unwrap();
    let mut rng = RandomSource::new(3, 0);
    let u = [0.123456789];
    let d = f.filter_action(&[0.1], &u, &mut rng).unwrap();
    assert_eq!(d.action, u.to_vec());
    assert_eq!(d.distance, 0.0);
    assert!(!d.binding);
}

#[test]
fn matches_exhaustive_action_search() {
    let model = shift_model();
    let vp = parabola();
    let quad = NoiseQuadrature::point(1);
    let xi = 0.25;
    let f = SafetyFilter::new(&model, &vp, &quad, Bounds::unit(1), config(xi)).unwrap();
    let mut rng = RandomSource::new(11, 0);
    let cases = [
        (0.9, 0.5),
        (-0.7, -0.9),
        (0.3, 0.9),
        (1.4, 0.0),
        (-1.2, 1.0),
        (0.0, 1.0),
    ];
    for (x, u_nom) in cases {
        let oracle = exhaustive(x, u_nom, xi, &vp).unwrap();
        let d = f.filter_action(&[x], &[u_nom], &mut rng).unwrap();
        assert!(
            (d.action[0] - oracle).abs() <= 2e-3,
            "x={x} u_nom={u_nom}: filter {} oracle {oracle}",
            d.action[0]
        );
        assert!(d.worst_case <= xi);
    }
}

#[test]
fn inflated_beta_is_infeasible() {
    let model = Wide(100.0);
    let vp = parabola();
    let quad = NoiseQuadrature::point(1);
    let f = SafetyFilter::new(&model, &vp, &quad, Bounds::unit(1), config(0.25)).unwrap();
    let mut rng = RandomSource::new(1, 0);
    assert!(matches!(
        f.filter_action(&[0.0], &[0.0], &mut rng),
        Err(Error::Infeasible)
    ));
    // the combined policy falls back to the backup
    let (u, _, branch) = f.combined_action(&[0.0], &[0.3], &ConstantPolicy(vec![-0.2]), &mut rng);
    assert_eq!(u, vec![-0.2]);
    assert_eq!(branch, Branch::Fallback);
}

#[test]
fn cem_adversary_approaches_vertex_enumeration() {
    let model = Wide(0.2);
    let vp = parabola();
    let quad = NoiseQuadrature::point(1);
    let exact = SafetyFilter::new(&model, &vp, &quad, Bounds::unit(1), config(0.25)).unwrap();
    let cem_cfg = FilterConfig {
        inner_eta_mode: InnerEtaMode::Cem,
        ..config(0.25)
    };
    let cem = SafetyFilter::new(&model, &vp, &quad, Bounds::unit(1), cem_cfg).unwrap();
    let rng = RandomSource::new(4, 0);
    for x in [-1.0, -0.3, 0.0, 0.4, 1.1] {
        let a = exact.worst_case(&[x], &[0.1], &rng);
        let b = cem.worst_case(&[x], &[0.1], &rng);
        // (x + 0.1 + 0.2 * eta)^2 is maximized at a vertex
        let oracle = ((x + 0.1f64).abs() + 0.2).powi(2);
        assert!((a - oracle).abs() < 1e-5, "vertex {a} vs {oracle}");
        assert!(b <= a + 1e-12 && b >= a - 2e-3, "cem {b} vs {a}");
    }
}

#[test]
fn combined_policy_branches() {
    let model = shift_model();
    let vp = parabola();
    let quad = NoiseQuadrature::point(1);
    let f = SafetyFilter::new(&model, &vp, &quad, Bounds::unit(1), config(0.25)).unwrap();
    let safe = FnPolicy(|x: &[f64]| vec![(-x[0]).clamp(-1.0, 1.0)]);
    let mut rng = RandomSource::new(0, 0);
    // V(x) = 0.81 > xi: exactly the backup action
    let (u, _, branch) = f.combined_action(&[0.9], &[0.5], &safe, &mut rng);
    assert_eq!((u, branch), (vec![-0.9], Branch::Backup));
    // V(x) <= xi and admissible nominal
    let (u, _, branch) = f.combined_action(&[0.2], &[0.1], &safe, &mut rng);
    assert_eq!((u, branch), (vec![0.1], Branch::Nominal));
    let (u, _, branch) = f.combined_action(&[0.4], &[0.5], &safe, &mut rng);
    assert_eq!(branch, Branch::Filtered);
    assert!((u[0] - 0.1).abs() < 2e-3);
}

#[test]
fn decreasing_xi_never_reduces_intervention() {
    let model = shift_model();
    let vp = parabola();
    let quad = NoiseQuadrature::point(1);
    let states: Vec<f64> = (0..15).map(|i| -0.7 + 0.1 * i as f64).collect();
    let mut previous: Option<Vec<f64>> = None;
    for xi in [0.6, 0.4, 0.25, 0.1, 0.02] {
        let f = SafetyFilter::new(&model, &vp, &quad, Bounds::unit(1), config(xi)).unwrap();
        let d: Vec<f64> = states
            .iter()
            .map(|x| {
                let mut rng = RandomSource::new(9, 0);
                f.filter_action(&[*x], &[0.8], &mut rng).unwrap().distance
            })
            .collect();
        if let Some(p) = &previous {
            for (a, b) in p.iter().zip(&d) {
                assert!(b + 1e-9 >= *a, "xi {xi}: {b} < {a}");
            }
        }
        previous = Some(d);
    }
}

fn backup(x: &[f64]) -> Vec<f64> {
    vec![(-x[0] - 1.5 * x[1]).clamp(-1.0, 1.0)]
}

/// Indicator-cost value of the backup on a zero-noise integrator. The cost
/// set `|p| <= 0.9` sits inside the safe set, which absorbs the one-cell
/// smear of interpolation at its edge.
fn integrator() -> (Arc<DoubleIntegratorEnv>, GridValueFunction) {
    let env = Arc::new(DoubleIntegratorEnv::new(DoubleIntegratorConfig::default()).unwrap());
    let grid = GridSpec::uniform(&[-2.0, -2.0], &[2.0, 2.0], &[41, 41]).unwrap();
    let e = env.clone();
    let model = KnownModel::new(2, 1, move |x: &[f64], u: &[f64]| e.mean_step(x, u));
    let cost = indicator_cost(Arc::new(|x: &[f64]| x[0].abs() <= 0.9));
    let sol = crate::value::pessimistic_value_grid(
        &model,
        &FnPolicy(backup),
        &cost,
        0.9,
        &grid,
        &NoiseQuadrature::point(2),
        EtaSearch::Nominal,
        &crate::value::SolverConfig::default(),
    )
    .unwrap();
    (env, sol.value)
}

#[test]
fn backup_as_nominal_is_never_modified() {
    let (env, vp) = integrator();
    let e = env.clone();
    let model = KnownModel::new(2, 1, move |x: &[f64], u: &[f64]| e.mean_step(x, u));
    let quad = NoiseQuadrature::point(2);
    let f = SafetyFilter::new(&model, &vp, &quad, env.action_bounds().clone(), config(0.5)).unwrap();
    let safe = FnPolicy(backup);
    let cost = indicator_cost(Arc::new(|x: &[f64]| x[0].abs() <= 1.0));
    let run = rollout_filtered(
        env.as_ref(),
        &safe,
        &safe,
        Some(&f),
        &cost,
        &[0.5, 0.0],
        100,
        &RandomSource::new(2, 0),
    )
    .unwrap();
    assert!(run.metrics.filter_distance.iter().all(|d| *d == 0.0));
    assert_eq!(run.metrics.interventions, 0);
    assert_eq!(run.metrics.violations, 0);
    assert_eq!(run.steps.len(), 100);
}

#[test]
fn filtered_rollout_replays_exactly() {
    let (env, vp) = integrator();
    let e = env.clone();
    let model = KnownModel::new(2, 1, move |x: &[f64], u: &[f64]| e.mean_step(x, u));
    let quad = NoiseQuadrature::point(2);
    let cfg = FilterConfig {
        cem_particles: 200,
        ..config(0.5)
    };
    let f = SafetyFilter::new(&model, &vp, &quad, env.action_bounds().clone(), cfg).unwrap();
    let safe = FnPolicy(backup);
    let pushy = ConstantPolicy(vec![1.0]);
    let cost = indicator_cost(Arc::new(|x: &[f64]| x[0].abs() <= 1.0));
    let rng = RandomSource::new(5, 1);
    let a = rollout_filtered(env.as_ref(), &pushy, &safe, Some(&f), &cost, &[0.0, 0.0], 60, &rng).unwrap();
    let b = rollout_filtered(env.as_ref(), &pushy, &safe, Some(&f), &cost, &[0.0, 0.0], 60, &rng).unwrap();
    assert_eq!(a.metrics, b.metrics);
    assert_eq!(a.trajectory, b.trajectory);
    assert!(a.metrics.interventions > 0);
    assert_eq!(a.metrics.violations, 0);
    // unchecked, the same nominal leaves the safe set
    let c = rollout_filtered(env.as_ref(), &pushy, &safe, None, &cost, &[0.0, 0.0], 60, &rng).unwrap();
    assert!(c.metrics.violations > 0);
    assert_eq!(c.metrics.interventions, 0);
}

#[test]
fn diagnostics_csv_layout() {
    let steps = vec![StepDiagnostics {
        k: 0,
        state: vec![0.5, -0.25],
        u_nominal: vec![1.0],
        u_filtered: vec![0.5],
        worst_case: 0.125,
        branch: Branch::Filtered,
    }];
    let mut out = Vec::new();
    write_diagnostics_csv(&mut out, &steps).unwrap();
    let text = String::from_utf8(out).unwrap();
    assert_eq!(
        text,
        "k,x_0,x_1,u_nom_0,u_filt_0,worst_case,branch\n0,0.5,-0.25,1,0.5,0.125,filtered\n"
    );
}

#[test]
fn config_validation() {
    assert!(config(0.5).validate(1.0).is_ok());
    assert!(config(1.0).validate(1.0).is_err());
    let thin = FilterConfig {
        cem_particles: 50,
        cem_elite_fraction: 0.5,
        ..config(0.5)
    };
    assert!(thin.validate(1.0).is_err());
    let parsed: FilterConfig = toml::from_str("xi = 0.4\ninner_eta_mode = \"cem\"").unwrap();
    assert_eq!(parsed.inner_eta_mode, InnerEtaMode::Cem);
    assert_eq!(parsed.cem_particles, 1000);
    assert!(toml::from_str::<FilterConfig>("xi = 0.4\nparticles = 3").is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]
    #[test]
    fn output_stays_in_action_box(x in -2.5f64..2.5, u in -3.0f64..3.0, xi in 0.01f64..2.0) {
        let model = shift_model();
        let vp = parabola();
        let quad = NoiseQuadrature::point(1);
        let cfg = FilterConfig { cem_particles: 100, ..config(xi) };
        let f = SafetyFilter::new(&model, &vp, &quad, Bounds::unit(1), cfg).unwrap();
        let mut rng = RandomSource::new(7, 0);
        let safe = ConstantPolicy(vec![0.0]);
        let (a, _, _) = f.combined_action(&[x], &[u], &safe, &mut rng);
        prop_assert!(Bounds::unit(1).contains(&a));
    }
}
