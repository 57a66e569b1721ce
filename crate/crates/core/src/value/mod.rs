//! Cost-values on grids: plain and pessimistic evaluation of a policy,
//! Monte-Carlo estimates under a fixed hallucination policy, and the
//! drift condition that feeds the certificate.

mod eta;
mod grid;
mod quadrature;
pub mod tabulated;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use eta::EtaSearch;
pub use grid::{AxisSpec, GridSpec, GridValueFunction, DEFAULT_NODE_CAP};
pub use quadrature::{gauss_hermite, NoiseQuadrature, DEFAULT_HERMITE_NODES, UNIFORM_SAMPLES};
pub use tabulated::{
    evaluate_max, solve_min_max, MaxSolution, MinMaxSolution, SolveReport, SolverConfig, SolverMethod, TabulatedMdp,
};

use crate::common::{norm, NoiseModel, Policy, RandomSource};
use crate::error::{Error, Result};
use crate::model::{hallucinate, hallucinated_step, CalibratedModel, KnownModel, Prediction};
use crate::objective::{cumulative_cost_mc, ImmediateCost, McEstimate, SafetyObjective};
use tabulated::merge_entries;

/// Sparse distribution of `x' = mu + beta sigma eta + omega` over grid
/// nodes, one row per eta candidate.
pub(crate) fn next_state_rows(
    grid: &GridSpec,
    quad: &NoiseQuadrature,
    p: &Prediction,
    beta: f64,
    etas: &[Vec<f64>],
) -> Vec<Vec<(u32, f64)>> {
    let d = grid.dim();
    let mut stencil = Vec::with_capacity(1 << d);
    let mut x = vec![0.0; d];
    let zero = vec![0.0; d];
    let mut row_for = |eta: &[f64]| {
        let centre = hallucinate(p, beta, eta, &zero);
        let mut row = Vec::with_capacity(quad.len() * (1 << d));
        for (omega, w) in quad.points().iter().zip(quad.weights()) {
            for i in 0..d {
                x[i] = centre[i] + omega[i];
            }
            grid.stencil(&x, &mut stencil);
            row.extend(stencil.iter().map(|(i, s)| (*i, w * s)));
        }
        merge_entries(&mut row);
        row
    };
    if p.std.iter().all(|s| *s == 0.0) || beta == 0.0 {
        let row = row_for(&etas[0]);
        vec![row; etas.len()]
    } else {
        etas.iter().map(|e| row_for(e)).collect()
    }
}

fn check_dims(model: &dyn CalibratedModel, grid: &GridSpec, quad: &NoiseQuadrature) -> Result<()> {
    if grid.dim() != model.state_dim() || quad.dim() != model.state_dim() {
        return Err(Error::invalid("grid, quadrature and model state dimensions differ"));
    }
    Ok(())
}

/// Actions of `policy` at every node. Grid solves treat the policy as
/// deterministic.
pub fn policy_on_grid(policy: &dyn Policy, grid: &GridSpec) -> Vec<Vec<f64>> {
    (0..grid.len())
        .into_par_iter()
        .map(|n| policy.act(&grid.node(n), &mut RandomSource::new(0, n as u64)))
        .collect()
}

/// One action per node, every eta candidate.
pub fn policy_table(
    model: &dyn CalibratedModel,
    actions: &[Vec<f64>],
    cost: &ImmediateCost,
    grid: &GridSpec,
    quad: &NoiseQuadrature,
    etas: &[Vec<f64>],
) -> Result<TabulatedMdp> {
    check_dims(model, grid, quad)?;
    let c: Vec<f64> = grid.nodes().map(|x| cost.eval(&x)).collect();
    let beta = model.beta();
    TabulatedMdp::build(grid.len(), 1, etas.len(), c, vec![0], |n| {
        let x = grid.node(n);
        let p = model.predict(&x, &actions[n]);
        Ok(next_state_rows(grid, quad, &p, beta, etas))
    })
}

/// Every candidate action at every node. Ties prefer the smallest-norm
/// candidate, then the lowest index.
pub fn candidate_table(
    model: &dyn CalibratedModel,
    candidates: &[Vec<f64>],
    cost: &ImmediateCost,
    grid: &GridSpec,
    quad: &NoiseQuadrature,
    etas: &[Vec<f64>],
) -> Result<TabulatedMdp> {
    check_dims(model, grid, quad)?;
    let c: Vec<f64> = grid.nodes().map(|x| cost.eval(&x)).collect();
    let beta = model.beta();
    let mut order: Vec<usize> = (0..candidates.len()).collect();
    order.sort_by(|a, b| norm(&candidates[*a]).total_cmp(&norm(&candidates[*b])).then(a.cmp(b)));
    TabulatedMdp::build(grid.len(), candidates.len(), etas.len(), c, order, |n| {
        let x = grid.node(n);
        let mut rows = Vec::with_capacity(candidates.len() * etas.len());
        for u in candidates {
            let p = model.predict(&x, u);
            rows.extend(next_state_rows(grid, quad, &p, beta, etas));
        }
        Ok(rows)
    })
}

#[derive(Debug, Clone)]
pub struct ValueSolution {
    pub value: GridValueFunction,
    /// Index into `eta_points` of the maximizing eta at each node.
    pub eta_index: Vec<usize>,
    pub eta_points: Vec<Vec<f64>>,
    pub report: SolveReport,
}

impl ValueSolution {
    /// Nearest-node lookup of the maximizing eta.
    pub fn eta_at(&self, x: &[f64]) -> Vec<f64> {
        self.eta_points[self.eta_index[self.value.grid().nearest(x)]].clone()
    }
}

/// Pessimistic cost-value of `policy`: the fixed point of
/// `V = c + gamma max_eta E_omega V(mu + beta sigma eta + omega)`.
#[allow(clippy::too_many_arguments)]
pub fn pessimistic_value_grid(
    model: &dyn CalibratedModel,
    policy: &dyn Policy,
    cost: &ImmediateCost,
    gamma: f64,
    grid: &GridSpec,
    quad: &NoiseQuadrature,
    eta: EtaSearch,
    solver: &SolverConfig,
) -> Result<ValueSolution> {
    let etas = eta.points(model.state_dim())?;
    let actions = policy_on_grid(policy, grid);
    let mdp = policy_table(model, &actions, cost, grid, quad, &etas)?;
    let sol = evaluate_max(&mdp, gamma, &vec![0; grid.len()], solver)?;
    Ok(ValueSolution {
        value: GridValueFunction::new(grid.clone(), sol.values)?,
        eta_index: sol.eta,
        eta_points: etas,
        report: sol.report,
    })
}

/// Cost-value of `policy` under known mean dynamics `f` plus noise.
#[allow(clippy::too_many_arguments)]
pub fn solve_value_grid<F>(
    dynamics: F,
    action_dim: usize,
    policy: &dyn Policy,
    cost: &ImmediateCost,
    gamma: f64,
    grid: &GridSpec,
    quad: &NoiseQuadrature,
    solver: &SolverConfig,
) -> Result<ValueSolution>
where
    F: Fn(&[f64], &[f64]) -> Vec<f64> + Send + Sync,
{
    let model = KnownModel::new(grid.dim(), action_dim, dynamics);
    pessimistic_value_grid(&model, policy, cost, gamma, grid, quad, EtaSearch::Nominal, solver)
}

/// `max_eta E_omega[V(mu(x,u) + beta sigma(x,u) eta + omega)]`.
pub fn worst_case_next_value(
    model: &dyn CalibratedModel,
    value: &GridValueFunction,
    x: &[f64],
    u: &[f64],
    quad: &NoiseQuadrature,
    etas: &[Vec<f64>],
) -> f64 {
    let p = model.predict(x, u);
    worst_case_from_prediction(&p, model.beta(), value, quad, etas)
}

pub(crate) fn worst_case_from_prediction(
    p: &Prediction,
    beta: f64,
    value: &GridValueFunction,
    quad: &NoiseQuadrature,
    etas: &[Vec<f64>],
) -> f64 {
    let rows = next_state_rows(value.grid(), quad, p, beta, etas);
    let v = value.values();
    rows.iter()
        .map(|r| r.iter().map(|(i, w)| w * v[*i as usize]).sum::<f64>())
        .fold(f64::NEG_INFINITY, f64::max)
}

/// Monte-Carlo cost of `policy` on the hallucinated dynamics driven by a
/// fixed `eta_policy`. Any fixed eta gives a lower estimate of the
/// pessimistic value.
#[allow(clippy::too_many_arguments)]
pub fn mc_pessimistic_value<E>(
    model: &dyn CalibratedModel,
    policy: &dyn Policy,
    eta_policy: E,
    noise: &NoiseModel,
    cost: &ImmediateCost,
    gamma: f64,
    x0: &[f64],
    n: usize,
    rng: &RandomSource,
) -> Result<McEstimate>
where
    E: Fn(&[f64]) -> Vec<f64> + Sync,
{
    let step = |x: &[f64], u: &[f64], r: &mut RandomSource| {
        let omega = noise.sample(r);
        hallucinated_step(model, x, u, &eta_policy(x), &omega)
    };
    let act = |x: &[f64], r: &mut RandomSource| Ok(policy.act(x, r));
    cumulative_cost_mc(step, act, cost, gamma, x0, n, rng)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DriftRegion {
    /// Every safe node.
    SafeSet,
    /// Safe nodes with `V < level`.
    SubLevel(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DriftOptions {
    pub region: DriftRegion,
    pub eta: EtaSearch,
    /// The margin is measured from `max(V, floor)`: every node must satisfy
    /// `max E V' <= (1 - lambda) max(V, floor) + lambda C_min`. Values below
    /// `C_min` are raised to it.
    pub floor: f64,
    /// Slack for floating-point comparisons.
    pub tol: f64,
}

impl Default for DriftOptions {
    fn default() -> Self {
        Self {
            region: DriftRegion::SafeSet,
            eta: EtaSearch::Vertices3,
            floor: f64::NEG_INFINITY,
            tol: 1e-9,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriftReport {
    pub holds: bool,
    /// `None` when every checked node is degenerate.
    pub lambda_max: Option<f64>,
    pub worst_state: Option<Vec<f64>>,
    pub nodes_checked: usize,
    /// Nodes with `V` at or below the floor.
    pub floor_nodes: usize,
    /// Floor and degenerate nodes whose expected next value does not drop
    /// below their level.
    pub floor_violations: usize,
    pub region: DriftRegion,
    pub floor: f64,
    pub c_min_bound: f64,
}

/// Linear drift `max_eta E V(x') <= W(x) - lambda (W(x) - C_min)` with
/// `W = max(V, floor)`, over the chosen region of grid nodes. `lambda_max`
/// is the largest rate that every node satisfies.
#[allow(clippy::too_many_arguments)]
pub fn check_drift(
    vp: &GridValueFunction,
    model: &dyn CalibratedModel,
    policy: &dyn Policy,
    is_safe: &(dyn Fn(&[f64]) -> bool + Sync),
    c_min_bound: f64,
    quad: &NoiseQuadrature,
    options: &DriftOptions,
) -> Result<DriftReport> {
    let grid = vp.grid();
    check_dims(model, grid, quad)?;
    let etas = options.eta.points(grid.dim())?;
    let floor = options.floor.max(c_min_bound);
    let v = vp.values();
    let nodes: Vec<usize> = (0..grid.len())
        .filter(|&n| {
            let x = grid.node(n);
            is_safe(&x)
                && match options.region {
                    DriftRegion::SafeSet => true,
                    DriftRegion::SubLevel(l) => v[n] < l,
                }
        })
        .collect();
    if nodes.is_empty() {
        return Err(Error::invalid("drift region contains no grid nodes"));
    }
    let actions = policy_on_grid(policy, grid);
    let next: Vec<f64> = nodes
        .par_iter()
        .map(|&n| worst_case_next_value(model, vp, &grid.node(n), &actions[n], quad, &etas))
        .collect();
    let mut lambda: Option<f64> = None;
    let mut worst = None;
    let mut floor_nodes = 0;
    let mut floor_violations = 0;
    for (k, &n) in nodes.iter().enumerate() {
        let below = v[n] <= floor;
        if below {
            floor_nodes += 1;
        }
        let level = v[n].max(floor);
        let denom = level - c_min_bound;
        if denom <= options.tol {
            // degenerate: nothing below C_min to fall to
            if next[k] > c_min_bound + options.tol {
                floor_violations += 1;
                worst.get_or_insert(n);
            }
            continue;
        }
        let l = (level - next[k]) / denom;
        if below && l <= 0.0 {
            floor_violations += 1;
        }
        if lambda.is_none_or(|m| l < m) {
            lambda = Some(l);
            worst = Some(n);
        }
    }
    let lambda = lambda.map(|l| l.min(1.0));
    let holds = lambda.is_none_or(|l| l > 0.0) && floor_violations == 0;
    Ok(DriftReport {
        holds,
        lambda_max: lambda,
        worst_state: worst.map(|n| grid.node(n)),
        nodes_checked: nodes.len(),
        floor_nodes,
        floor_violations,
        region: options.region,
        floor,
        c_min_bound,
    })
}

/// Everything the level ladder needs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CertInput {
    pub lambda: f64,
    pub xi: f64,
    pub xi_bar: f64,
    pub v_min: f64,
    pub v_max: f64,
    pub floor: f64,
}

impl CertInput {
    pub fn new(lambda: f64, xi: f64, xi_bar: f64, v_min: f64, v_max: f64, floor: f64) -> Result<Self> {
        if !(lambda > 0.0 && lambda <= 1.0) {
            return Err(Error::invalid(format!("drift rate {lambda} outside (0, 1]")));
        }
        if !(xi < xi_bar) {
            return Err(Error::invalid(format!(
                "xi = {xi} must be strictly below xi_bar = {xi_bar}"
            )));
        }
        if !(v_min <= xi && v_min < v_max) {
            return Err(Error::invalid(
                "value bounds must satisfy v_min <= xi and v_min < v_max",
            ));
        }
        if floor > xi {
            return Err(Error::invalid("drift floor must not exceed xi"));
        }
        Ok(Self {
            lambda,
            xi,
            xi_bar,
            v_min,
            v_max,
            floor,
        })
    }
}

/// Packages a verified drift condition for certification.
pub fn certify_policy(vp: &GridValueFunction, objective: &SafetyObjective, drift: &DriftReport) -> Result<CertInput> {
    if !drift.holds {
        return Err(Error::invalid("drift condition does not hold; nothing to certify"));
    }
    let lambda = drift
        .lambda_max
        .ok_or_else(|| Error::invalid("drift rate undefined: every checked node is degenerate"))?;
    if let DriftRegion::SubLevel(l) = drift.region {
        if l < objective.xi_bar() {
            return Err(Error::invalid(
                "drift was checked on a region smaller than the xi_bar sub-level set",
            ));
        }
    }
    if drift.c_min_bound > objective.c_min_bound() {
        return Err(Error::invalid("drift used a value floor above the objective's bound"));
    }
    CertInput::new(
        lambda,
        objective.xi(),
        objective.xi_bar(),
        objective.c_min_bound(),
        vp.max_value().max(objective.xi_bar()),
        drift.floor,
    )
}

#[cfg(test)]
mod tests;
