//! Finite robust MDPs with tabulated sparse transitions, and the solvers
//! shared by every grid and chain computation.
//!
//! Rows are indexed by `(state, action, eta)`; each row is a sparse
//! distribution over next states.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::envs::{DiscreteChainMDP, IntervalChainMdp};
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct TabulatedMdp {
    n_states: usize,
    n_actions: usize,
    n_eta: usize,
    cost: Vec<f64>,
    offsets: Vec<usize>,
    index: Vec<u32>,
    weight: Vec<f64>,
    action_order: Vec<usize>,
}

/// Sorts by next-state index and merges duplicates.
pub(crate) fn merge_entries(entries: &mut Vec<(u32, f64)>) {
    entries.sort_by_key(|e| e.0);
    let mut out = 0;
    for k in 0..entries.len() {
        if out > 0 && entries[out - 1].0 == entries[k].0 {
            entries[out - 1].1 += entries[k].1;
        } else {
            entries[out] = entries[k];
            out += 1;
        }
    }
    entries.truncate(out);
}

impl TabulatedMdp {
    /// `rows(s)` returns the `n_actions * n_eta` rows of state `s`, action
    /// major. `action_order` lists actions from most to least preferred for
    /// breaking ties.
    pub fn build<F>(
        n_states: usize,
        n_actions: usize,
        n_eta: usize,
        cost: Vec<f64>,
        action_order: Vec<usize>,
        rows: F,
    ) -> Result<Self>
    where
        F: Fn(usize) -> Result<Vec<Vec<(u32, f64)>>> + Sync,
    {
        if n_states == 0 || n_actions == 0 || n_eta == 0 {
            return Err(Error::invalid("tabulated MDP needs states, actions and eta candidates"));
        }
        if cost.len() != n_states {
            return Err(Error::invalid("cost vector length differs from the state count"));
        }
        let mut seen = vec![false; n_actions];
        if action_order.len() != n_actions
            || action_order
                .iter()
                .any(|a| *a >= n_actions || std::mem::replace(&mut seen[*a], true))
        {
            return Err(Error::invalid("action order must be a permutation of the actions"));
        }
        let per_state: Vec<Vec<Vec<(u32, f64)>>> = (0..n_states)
            .into_par_iter()
            .map(|s| {
                let r = rows(s)?;
                if r.len() != n_actions * n_eta {
                    return Err(Error::invalid("wrong number of rows for a state"));
                }
                Ok(r)
            })
            .collect::<Result<_>>()?;
        let total: usize = per_state.iter().flatten().map(Vec::len).sum();
        let mut offsets = Vec::with_capacity(n_states * n_actions * n_eta + 1);
        let mut index = Vec::with_capacity(total);
        let mut weight = Vec::with_capacity(total);
        offsets.push(0);
        for row in per_state.into_iter().flatten() {
            for (i, w) in row {
                if i as usize >= n_states {
                    return Err(Error::invalid("transition to an unknown state"));
                }
                index.push(i);
                weight.push(w);
            }
            offsets.push(index.len());
        }
        Ok(Self {
            n_states,
            n_actions,
            n_eta,
            cost,
            offsets,
            index,
            weight,
            action_order,
        })
    }

    /// Single-policy chain: one action, one eta.
    pub fn from_markov_matrix(p: &[Vec<f64>], cost: Vec<f64>) -> Result<Self> {
        let n = p.len();
        Self::build(n, 1, 1, cost, vec![0], |s| Ok(vec![sparse(&p[s])]))
    }

    pub fn from_chain(chain: &DiscreteChainMDP, cost: Vec<f64>) -> Result<Self> {
        let n = chain.n_states();
        let m = chain.n_actions();
        Self::build(n, m, 1, cost, (0..m).collect(), |s| {
            Ok((0..m).map(|u| sparse(chain.row(u, s))).collect())
        })
    }

    /// Action `u` is preferred over `u + 1` in ties; rows enumerate the
    /// given eta candidates (each in `[-1, 1]^k`, truncated or zero-padded to
    /// the per-row direction count).
    pub fn from_interval_chain(chain: &IntervalChainMdp, cost: Vec<f64>, etas: &[Vec<f64>]) -> Result<Self> {
        let n = chain.n_states();
        let m = chain.n_actions();
        Self::build(n, m, etas.len(), cost, (0..m).collect(), |s| {
            let mut rows = Vec::with_capacity(m * etas.len());
            for u in 0..m {
                let k = chain.n_directions(u, s);
                for e in etas {
                    let mut eta = vec![0.0; k];
                    for (d, v) in eta.iter_mut().zip(e) {
                        *d = *v;
                    }
                    rows.push(sparse(&chain.distribution(u, s, &eta)?));
                }
            }
            Ok(rows)
        })
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn n_eta(&self) -> usize {
        self.n_eta
    }

    pub fn cost(&self) -> &[f64] {
        &self.cost
    }

    pub fn entries(&self) -> usize {
        self.index.len()
    }

    pub fn row(&self, s: usize, a: usize, e: usize) -> (&[u32], &[f64]) {
        let r = (s * self.n_actions + a) * self.n_eta + e;
        let (lo, hi) = (self.offsets[r], self.offsets[r + 1]);
        (&self.index[lo..hi], &self.weight[lo..hi])
    }

    /// `E[V(x')]` for one row.
    #[inline]
    pub fn expect(&self, s: usize, a: usize, e: usize, v: &[f64]) -> f64 {
        let (idx, w) = self.row(s, a, e);
        idx.iter().zip(w).map(|(i, p)| p * v[*i as usize]).sum()
    }

    /// `max_e E[V(x')]` and the first maximizing eta.
    #[inline]
    pub fn worst_case(&self, s: usize, a: usize, v: &[f64]) -> (f64, usize) {
        let mut best = self.expect(s, a, 0, v);
        let mut arg = 0;
        for e in 1..self.n_eta {
            let q = self.expect(s, a, e, v);
            if q > best {
                best = q;
                arg = e;
            }
        }
        (best, arg)
    }

    fn lower_start(&self, gamma: f64) -> f64 {
        let c_min = self.cost.iter().copied().fold(f64::INFINITY, f64::min);
        c_min / (1.0 - gamma)
    }

    /// Preferred action among those within `tie_tol` of the minimum.
    fn pick_action(&self, q: &[f64], tie_tol: f64, current: Option<usize>) -> usize {
        let min = q.iter().copied().fold(f64::INFINITY, f64::min);
        if let Some(c) = current {
            if q[c] <= min + tie_tol {
                return c;
            }
        }
        *self
            .action_order
            .iter()
            .find(|a| q[**a] <= min + tie_tol)
            .expect("the minimizer is within tolerance of itself")
    }
}

fn sparse(p: &[f64]) -> Vec<(u32, f64)> {
    p.iter()
        .enumerate()
        .filter(|(_, w)| **w != 0.0)
        .map(|(i, w)| (i as u32, *w))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SolverMethod {
    /// Greedy adversary then several evaluation sweeps; Hoffman-Karp for
    /// min-max problems.
    PolicyIteration,
    /// Plain Jacobi value iteration.
    ValueIteration,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverConfig {
    /// Target sup-norm distance to the fixed point.
    pub tol: f64,
    pub max_sweeps: usize,
    pub eval_sweeps: usize,
    pub method: SolverMethod,
    /// Actions whose values differ by at most this much are tied.
    pub tie_tol: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            tol: 1e-8,
            max_sweeps: 2_000_000,
            eval_sweeps: 30,
            method: SolverMethod::PolicyIteration,
            tie_tol: 1e-9,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveReport {
    pub sweeps: usize,
    /// Bellman residuals `|T V - V|_inf` at each full (greedy) sweep.
    pub residuals: Vec<f64>,
    /// Guaranteed sup-norm distance of the returned values to the fixed point.
    pub error_bound: f64,
}

#[derive(Debug, Clone)]
pub struct MaxSolution {
    pub values: Vec<f64>,
    pub eta: Vec<usize>,
    pub report: SolveReport,
}

#[derive(Debug, Clone)]
pub struct MinMaxSolution {
    pub values: Vec<f64>,
    pub actions: Vec<usize>,
    pub eta: Vec<usize>,
    pub report: SolveReport,
}

fn sup_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn check_gamma(gamma: f64) -> Result<()> {
    if gamma > 0.0 && gamma < 1.0 {
        Ok(())
    } else {
        Err(Error::invalid(format!("discount {gamma} outside (0, 1)")))
    }
}

/// Fixed point of `V = c + gamma * max_e E_{a(s), e}[V]` for fixed actions.
pub fn evaluate_max(mdp: &TabulatedMdp, gamma: f64, actions: &[usize], cfg: &SolverConfig) -> Result<MaxSolution> {
    let start = vec![mdp.lower_start(gamma); mdp.n_states];
    evaluate_max_from(mdp, gamma, actions, cfg, start)
}

fn evaluate_max_from(
    mdp: &TabulatedMdp,
    gamma: f64,
    actions: &[usize],
    cfg: &SolverConfig,
    mut v: Vec<f64>,
) -> Result<MaxSolution> {
    check_gamma(gamma)?;
    if actions.len() != mdp.n_states || actions.iter().any(|a| *a >= mdp.n_actions) {
        return Err(Error::invalid("action assignment does not match the MDP"));
    }
    let mut residuals = Vec::new();
    let mut sweeps = 0;
    let mut next = vec![0.0; mdp.n_states];
    let mut eta = vec![0usize; mdp.n_states];
    loop {
        let greedy: Vec<(f64, usize)> = (0..mdp.n_states)
            .into_par_iter()
            .map(|s| mdp.worst_case(s, actions[s], &v))
            .collect();
        for (s, (q, e)) in greedy.into_iter().enumerate() {
            next[s] = mdp.cost[s] + gamma * q;
            eta[s] = e;
        }
        let r = sup_diff(&next, &v);
        std::mem::swap(&mut v, &mut next);
        residuals.push(r);
        sweeps += 1;
        let bound = gamma * r / (1.0 - gamma);
        if bound <= cfg.tol {
            return Ok(MaxSolution {
                values: v,
                eta,
                report: SolveReport {
                    sweeps,
                    residuals,
                    error_bound: bound,
                },
            });
        }
        if sweeps >= cfg.max_sweeps || !r.is_finite() {
            return Err(Error::NotConverged {
                iterations: sweeps,
                residual: r,
            });
        }
        if cfg.method == SolverMethod::PolicyIteration {
            for _ in 1..cfg.eval_sweeps.max(1) {
                next.par_iter_mut().enumerate().for_each(|(s, out)| {
                    *out = mdp.cost[s] + gamma * mdp.expect(s, actions[s], eta[s], &v);
                });
                std::mem::swap(&mut v, &mut next);
                sweeps += 1;
            }
        }
    }
}

/// `min_a max_e` Q-values at one state.
fn min_max_q(mdp: &TabulatedMdp, s: usize, v: &[f64]) -> Vec<f64> {
    (0..mdp.n_actions).map(|a| mdp.worst_case(s, a, v).0).collect()
}

/// Fixed point of `V = c + gamma * min_a max_e E_{a, e}[V]`, with actions
/// chosen by the tie rule of the MDP's action order.
pub fn solve_min_max(mdp: &TabulatedMdp, gamma: f64, cfg: &SolverConfig) -> Result<MinMaxSolution> {
    check_gamma(gamma)?;
    let n = mdp.n_states;
    let mut v = vec![mdp.lower_start(gamma); n];
    let mut residuals = Vec::new();
    let mut sweeps = 0;
    if cfg.method == SolverMethod::PolicyIteration {
        let mut actions: Vec<usize> = (0..n)
            .into_par_iter()
            .map(|s| mdp.pick_action(&min_max_q(mdp, s, &v), cfg.tie_tol, None))
            .collect();
        let inner = SolverConfig {
            tol: cfg.tol * 1e-2,
            ..*cfg
        };
        loop {
            let sol = evaluate_max_from(mdp, gamma, &actions, &inner, v)?;
            sweeps += sol.report.sweeps;
            residuals.extend(sol.report.residuals);
            v = sol.values;
            let improved: Vec<usize> = (0..n)
                .into_par_iter()
                .map(|s| mdp.pick_action(&min_max_q(mdp, s, &v), cfg.tie_tol, Some(actions[s])))
                .collect();
            if improved == actions {
                break;
            }
            actions = improved;
            if sweeps >= cfg.max_sweeps {
                return Err(Error::NotConverged {
                    iterations: sweeps,
                    residual: f64::NAN,
                });
            }
        }
    }
    let mut next = vec![0.0; n];
    loop {
        next.par_iter_mut().enumerate().for_each(|(s, out)| {
            let q = min_max_q(mdp, s, &v);
            *out = mdp.cost[s] + gamma * q.iter().copied().fold(f64::INFINITY, f64::min);
        });
        let r = sup_diff(&next, &v);
        std::mem::swap(&mut v, &mut next);
        residuals.push(r);
        sweeps += 1;
        let bound = gamma * r / (1.0 - gamma);
        if bound <= cfg.tol {
            let picks: Vec<(usize, usize)> = (0..n)
                .into_par_iter()
                .map(|s| {
                    let a = mdp.pick_action(&min_max_q(mdp, s, &v), cfg.tie_tol, None);
                    (a, mdp.worst_case(s, a, &v).1)
                })
                .collect();
            let (actions, eta) = picks.into_iter().unzip();
            return Ok(MinMaxSolution {
                values: v,
                actions,
                eta,
                report: SolveReport {
                    sweeps,
                    residuals,
                    error_bound: bound,
                },
            });
        }
        if sweeps >= cfg.max_sweeps || !r.is_finite() {
            return Err(Error::NotConverged {
                iterations: sweeps,
                residual: r,
            });
        }
    }
}
