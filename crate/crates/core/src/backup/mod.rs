//! Backup policies minimizing the pessimistic cost-value: exact robust
//! value iteration on grids and interval chains, and a parametric minimax
//! population search for continuous policies.

mod cem;
mod lqr;
mod policies;

pub use cem::{cem_minimax_policy, CemMinimaxConfig, CemMinimaxResult};
pub use lqr::{dlqr, linearize, lqr_about_equilibrium, LqrDesign};
pub use policies::{BackupPolicy, FeatureMap, ParametricPolicy, TabularPolicy};

use crate::common::Bounds;
use crate::envs::IntervalChainMdp;
use crate::error::{Error, Result};
use crate::model::CalibratedModel;
use crate::objective::ImmediateCost;
use crate::value::{
    candidate_table, solve_min_max, EtaSearch, GridSpec, GridValueFunction, NoiseQuadrature, SolveReport, SolverConfig,
    TabulatedMdp,
};

pub const DEFAULT_ACTION_POINTS: usize = 17;

/// Tensor grid of `points` values per action dimension spanning the box.
pub fn action_grid(bounds: &Bounds, points: usize) -> Result<Vec<Vec<f64>>> {
    if points == 0 {
        return Err(Error::invalid("action grid needs at least one point per dimension"));
    }
    let axis = |i: usize| -> Vec<f64> {
        let (l, u) = (bounds.lower()[i], bounds.upper()[i]);
        if points == 1 || l == u {
            vec![0.5 * (l + u)]
        } else {
            (0..points)
                .map(|k| {
                    if k + 1 == points {
                        u
                    } else {
                        l + (u - l) * k as f64 / (points - 1) as f64
                    }
                })
                .collect()
        }
    };
    let mut out = vec![Vec::new()];
    for i in 0..bounds.dim() {
        let values = axis(i);
        out = out
            .into_iter()
            .flat_map(|prefix| {
                values.iter().map(move |v| {
                    let mut p = prefix.clone();
                    p.push(*v);
                    p
                })
            })
            .collect();
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct RobustSolution {
    pub value: GridValueFunction,
    pub policy: TabularPolicy,
    pub eta_index: Vec<usize>,
    pub eta_points: Vec<Vec<f64>>,
    pub report: SolveReport,
}

/// Fixed point of `V = c + gamma min_u max_eta E_omega V(x')` over a finite
/// action set, with the minimizing tabular policy. Ties go to the
/// smallest-norm action.
#[allow(clippy::too_many_arguments)]
pub fn robust_value_iteration(
    model: &dyn CalibratedModel,
    cost: &ImmediateCost,
    gamma: f64,
    grid: &GridSpec,
    candidates: &[Vec<f64>],
    action_bounds: &Bounds,
    eta: EtaSearch,
    quad: &NoiseQuadrature,
    solver: &SolverConfig,
) -> Result<RobustSolution> {
    if candidates.is_empty() {
        return Err(Error::invalid("robust value iteration needs candidate actions"));
    }
    if let Some(u) = candidates.iter().find(|u| !action_bounds.contains(u)) {
        return Err(Error::invalid(format!(
            "candidate action {u:?} lies outside the action box"
        )));
    }
    let etas = eta.points(model.state_dim())?;
    let mdp = candidate_table(model, candidates, cost, grid, quad, &etas)?;
    let sol = solve_min_max(&mdp, gamma, solver)?;
    let actions = sol.actions.iter().map(|a| candidates[*a].clone()).collect();
    Ok(RobustSolution {
        value: GridValueFunction::new(grid.clone(), sol.values)?,
        policy: TabularPolicy::new(grid.clone(), actions, action_bounds.clone())?,
        eta_index: sol.eta,
        eta_points: etas,
        report: sol.report,
    })
}

#[derive(Debug, Clone)]
pub struct ChainRobustSolution {
    pub values: Vec<f64>,
    pub actions: Vec<usize>,
    pub eta: Vec<usize>,
    pub eta_points: Vec<Vec<f64>>,
    pub report: SolveReport,
}

/// Robust value iteration on an interval chain. The adversary ranges over
/// the vertices of the perturbation box, where the linear inner maximum is
/// attained. Ties go to the lowest action index.
pub fn robust_chain_value_iteration(
    chain: &IntervalChainMdp,
    cost: &[f64],
    gamma: f64,
    solver: &SolverConfig,
) -> Result<ChainRobustSolution> {
    let k = (0..chain.n_actions())
        .flat_map(|u| (0..chain.n_states()).map(move |s| (u, s)))
        .map(|(u, s)| chain.n_directions(u, s))
        .max()
        .unwrap_or(0);
    let etas = if k == 0 {
        vec![Vec::new()]
    } else {
        EtaSearch::Corners.points(k)?
    };
    let mdp = TabulatedMdp::from_interval_chain(chain, cost.to_vec(), &etas)?;
    let sol = solve_min_max(&mdp, gamma, solver)?;
    Ok(ChainRobustSolution {
        values: sol.values,
        actions: sol.actions,
        eta: sol.eta,
        eta_points: etas,
        report: sol.report,
    })
}
