//! Online safety filter: the nominal action is kept whenever the
//! pessimistic next-state value of the backup stays below `xi`, otherwise
//! the closest admissible action is searched for, and the backup takes over
//! when nothing admissible is found or the state is already outside the
//! sub-level set.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::common::cem::{elite_count, GaussianSearch};
use crate::common::{distance, Bounds, Policy, RandomSource, Trajectory};
use crate::envs::Environment;
use crate::error::{Error, Result};
use crate::model::CalibratedModel;
use crate::objective::ImmediateCost;
use crate::value::{worst_case_from_prediction, EtaSearch, GridValueFunction, NoiseQuadrature};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InnerEtaMode {
    /// Corners of the box plus its center; population search above three
    /// state dimensions.
    #[default]
    VertexEnum,
    Cem,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FilterConfig {
    pub xi: f64,
    pub cem_particles: usize,
    pub cem_iterations: usize,
    pub cem_elite_fraction: f64,
    pub inner_eta_mode: InnerEtaMode,
    pub eta_particles: usize,
    pub eta_iterations: usize,
    /// Bisection steps from the best sampled action towards the nominal one.
    pub line_search_steps: usize,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self {
            xi: 0.5,
            cem_particles: 1000,
            cem_iterations: 5,
            cem_elite_fraction: 0.1,
            inner_eta_mode: InnerEtaMode::VertexEnum,
            eta_particles: 32,
            eta_iterations: 4,
            line_search_steps: 12,
        }
    }
}

impl FilterConfig {
    pub fn validate(&self, xi_bar: f64) -> Result<()> {
        if !self.xi.is_finite() || self.xi >= xi_bar {
            return Err(Error::invalid(format!(
                "filter xi {} must be below xi_bar {xi_bar}",
                self.xi
            )));
        }
        if !(self.cem_elite_fraction > 0.0 && self.cem_elite_fraction <= 1.0) {
            return Err(Error::invalid("elite fraction must lie in (0, 1]"));
        }
        if self.cem_iterations == 0
            || self.cem_particles < 10 * elite_count(self.cem_particles, self.cem_elite_fraction)
        {
            return Err(Error::invalid(
                "filter search needs iterations and at least ten particles per elite",
            ));
        }
        if self.inner_eta_mode == InnerEtaMode::Cem && (self.eta_particles < 2 || self.eta_iterations == 0) {
            return Err(Error::invalid("inner adversary search needs particles and iterations"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Branch {
    /// Nominal action admissible and kept.
    Nominal,
    /// Nominal action replaced by the closest admissible sample.
    Filtered,
    /// No admissible sample; backup action used.
    Fallback,
    /// State above `xi`; backup action used.
    Backup,
}

impl Branch {
    pub fn as_str(&self) -> &'static str {
        match self {
            Branch::Nominal => "nominal",
            Branch::Filtered => "filtered",
            Branch::Fallback => "fallback",
            Branch::Backup => "backup",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FilterDecision {
    pub action: Vec<f64>,
    pub worst_case: f64,
    pub distance: f64,
    /// True when the nominal action violated the constraint.
    pub binding: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepDiagnostics {
    pub k: usize,
    pub state: Vec<f64>,
    pub u_nominal: Vec<f64>,
    pub u_filtered: Vec<f64>,
    pub worst_case: f64,
    pub branch: Branch,
}

impl StepDiagnostics {
    pub fn distance(&self) -> f64 {
        distance(&self.u_nominal, &self.u_filtered)
    }
}

/// Pessimistic one-step constraint of a backup value function.
pub struct SafetyFilter<'a> {
    model: &'a dyn CalibratedModel,
    vp: &'a GridValueFunction,
    quad: &'a NoiseQuadrature,
    bounds: Bounds,
    config: FilterConfig,
    etas: Vec<Vec<f64>>,
}

impl<'a> SafetyFilter<'a> {
    pub fn new(
        model: &'a dyn CalibratedModel,
        vp: &'a GridValueFunction,
        quad: &'a NoiseQuadrature,
        action_bounds: Bounds,
        config: FilterConfig,
    ) -> Result<Self> {
        let dx = model.state_dim();
        if vp.grid().dim() != dx || quad.dim() != dx || action_bounds.dim() != model.action_dim() {
            return Err(Error::invalid(
                "filter model, value grid, quadrature and action box disagree",
            ));
        }
        if config.cem_particles == 0 || config.cem_iterations == 0 {
            return Err(Error::invalid("filter search needs particles and iterations"));
        }
        let etas = match config.inner_eta_mode {
            InnerEtaMode::VertexEnum if dx <= 3 => EtaSearch::Corners.points(dx)?,
            _ => Vec::new(),
        };
        Ok(Self {
            model,
            vp,
            quad,
            bounds: action_bounds,
            config,
            etas,
        })
    }

    pub fn config(&self) -> &FilterConfig {
        &self.config
    }

    pub fn value(&self) -> &GridValueFunction {
        self.vp
    }

    pub fn action_bounds(&self) -> &Bounds {
        &self.bounds
    }

    /// `max_eta E_omega[Vp(mu + beta sigma eta + omega)]`.
    pub fn worst_case(&self, x: &[f64], u: &[f64], rng: &RandomSource) -> f64 {
        let p = self.model.predict(x, u);
        let beta = self.model.beta();
        if !self.etas.is_empty() {
            return worst_case_from_prediction(&p, beta, self.vp, self.quad, &self.etas);
        }
        let zero = vec![0.0; x.len()];
        let mut best = worst_case_from_prediction(&p, beta, self.vp, self.quad, std::slice::from_ref(&zero));
        if beta == 0.0 || p.std.iter().all(|s| *s == 0.0) {
            return best;
        }
        let mut rng = rng.clone();
        let unit = Bounds::unit(x.len());
        let mut search = GaussianSearch::new(zero, vec![0.5; x.len()], 1e-3);
        let n = self.config.eta_particles;
        let elites = elite_count(n, 0.25).max(1);
        for _ in 0..self.config.eta_iterations {
            let mut cands: Vec<Vec<f64>> = (0..n).map(|_| unit.clamp(&search.sample(&mut rng))).collect();
            cands.push(unit.clamp(&search.mean));
            // the maximum of a multilinear interpolant sits on a vertex
            cands.push(search.mean.iter().map(|m| if *m < 0.0 { -1.0 } else { 1.0 }).collect());
            let scores: Vec<f64> = cands
                .iter()
                .map(|e| -worst_case_from_prediction(&p, beta, self.vp, self.quad, std::slice::from_ref(e)))
                .collect();
            let order = crate::common::cem::best_indices(&scores, elites);
            best = best.max(-scores[order[0]]);
            let refs: Vec<&[f64]> = order.iter().map(|i| cands[*i].as_slice()).collect();
            search.refit(&refs);
        }
        best
    }

    pub fn is_admissible(&self, x: &[f64], u: &[f64], rng: &RandomSource) -> bool {
        self.worst_case(x, u, rng) <= self.config.xi
    }

    /// Closest admissible action to `u_nominal`. The nominal action is
    /// checked first and returned unchanged when admissible; otherwise a
    /// population search started at it ranks admissible samples by distance
    /// and the rest by their excess over `xi`.
    pub fn filter_action(&self, x: &[f64], u_nominal: &[f64], rng: &mut RandomSource) -> Result<FilterDecision> {
        let xi = self.config.xi;
        let probe = rng.fork(u64::MAX);
        if self.bounds.contains(u_nominal) {
            let wc = self.worst_case(x, u_nominal, &probe);
            if wc <= xi {
                return Ok(FilterDecision {
                    action: u_nominal.to_vec(),
                    worst_case: wc,
                    distance: 0.0,
                    binding: false,
                });
            }
        }
        let du = self.bounds.dim();
        let start = self.bounds.clamp(u_nominal);
        let std: Vec<f64> = (0..du).map(|i| 0.25 * self.bounds.width(i)).collect();
        let floor = 1e-9 * std.iter().cloned().fold(0.0, f64::max);
        let mut search = GaussianSearch::new(start.clone(), std, floor);
        let n = self.config.cem_particles;
        let k = elite_count(n, self.config.cem_elite_fraction);
        let mut best: Option<(f64, Vec<f64>, f64)> = None;
        for it in 0..self.config.cem_iterations {
            let mut cands = Vec::with_capacity(n);
            if it == 0 {
                cands.push(start.clone());
            }
            while cands.len() < n {
                cands.push(self.bounds.clamp(&search.sample(rng)));
            }
            let base = rng.fork(it as u64);
            let wc: Vec<f64> = cands
                .par_iter()
                .enumerate()
                .map(|(i, u)| self.worst_case(x, u, &base.fork(i as u64)))
                .collect();
            // admissible first by distance, then by excess over xi
            let key = |i: usize| -> (bool, f64) {
                if wc[i] <= xi {
                    (false, distance(u_nominal, &cands[i]))
                } else {
                    (true, wc[i] - xi)
                }
            };
            let mut order: Vec<usize> = (0..cands.len()).collect();
            order.sort_by(|a, b| {
                let (fa, sa) = key(*a);
                let (fb, sb) = key(*b);
                fa.cmp(&fb).then(sa.total_cmp(&sb)).then(a.cmp(b))
            });
            let top = order[0];
            if wc[top] <= xi {
                let d = distance(u_nominal, &cands[top]);
                if best.as_ref().is_none_or(|b| d < b.0) {
                    best = Some((d, cands[top].clone(), wc[top]));
                }
            }
            let refs: Vec<&[f64]> = order[..k.min(order.len())]
                .iter()
                .map(|i| cands[*i].as_slice())
                .collect();
            search.refit(&refs);
        }
        let (mut d, u0, mut wc) = best.ok_or(Error::Infeasible)?;
        // bisect the segment towards the nominal action
        let mut u = u0.clone();
        let (mut lo, mut hi) = (0.0, 1.0);
        for _ in 0..self.config.line_search_steps {
            let mid = 0.5 * (lo + hi);
            let cand: Vec<f64> = u0.iter().zip(&start).map(|(a, b)| a + mid * (b - a)).collect();
            let w = self.worst_case(x, &cand, &probe);
            if w <= xi {
                lo = mid;
                let dc = distance(u_nominal, &cand);
                if dc < d {
                    d = dc;
                    wc = w;
                    u = cand;
                }
            } else {
                hi = mid;
            }
        }
        Ok(FilterDecision {
            action: u,
            worst_case: wc,
            distance: d,
            binding: true,
        })
    }

    /// Roll-out policy: filtered nominal action while `Vp(x) <= xi`, the
    /// backup action otherwise or when no admissible action was found.
    pub fn combined_action(
        &self,
        x: &[f64],
        u_nominal: &[f64],
        pi_safe: &dyn Policy,
        rng: &mut RandomSource,
    ) -> (Vec<f64>, f64, Branch) {
        if self.vp.eval(x) <= self.config.xi {
            match self.filter_action(x, u_nominal, rng) {
                Ok(d) => {
                    let branch = if d.binding { Branch::Filtered } else { Branch::Nominal };
                    return (d.action, d.worst_case, branch);
                }
                Err(_) => {
                    let u = self.bounds.clamp(&pi_safe.act(x, rng));
                    let wc = self.worst_case(x, &u, &rng.fork(u64::MAX));
                    return (u, wc, Branch::Fallback);
                }
            }
        }
        let u = self.bounds.clamp(&pi_safe.act(x, rng));
        let wc = self.worst_case(x, &u, &rng.fork(u64::MAX));
        (u, wc, Branch::Backup)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeMetrics {
    /// Undiscounted sum of rewards.
    pub episode_return: f64,
    /// Undiscounted sum of immediate costs over the visited states.
    pub cumulative_cost: f64,
    /// Visited states `x_1..x_K` outside the safe set.
    pub violations: usize,
    /// Steps where the applied action differs from the nominal one.
    pub interventions: usize,
    pub filter_distance: Vec<f64>,
}

impl EpisodeMetrics {
    pub fn mean_distance(&self) -> f64 {
        if self.filter_distance.is_empty() {
            0.0
        } else {
            self.filter_distance.iter().sum::<f64>() / self.filter_distance.len() as f64
        }
    }
}

#[derive(Debug, Clone)]
pub struct FilteredRollout {
    pub trajectory: Trajectory,
    pub metrics: EpisodeMetrics,
    pub steps: Vec<StepDiagnostics>,
}

#[allow(clippy::too_many_arguments)]
/// One episode on the true system. With `filter = None` the nominal policy
/// acts unchecked. The environment, nominal policy and filter draw from
/// separate forks of `rng`.
pub fn rollout_filtered(
    env: &dyn Environment,
    nominal: &dyn Policy,
    pi_safe: &dyn Policy,
    filter: Option<&SafetyFilter<'_>>,
    cost: &ImmediateCost,
    x0: &[f64],
    horizon: usize,
    rng: &RandomSource,
) -> Result<FilteredRollout> {
    let mut env_rng = rng.fork(0);
    let mut nom_rng = rng.fork(1);
    let mut filt_rng = rng.fork(2);
    let mut steps = Vec::with_capacity(horizon);
    let mut metrics = EpisodeMetrics {
        episode_return: 0.0,
        cumulative_cost: cost.eval(x0),
        violations: 0,
        interventions: 0,
        filter_distance: Vec::with_capacity(horizon),
    };
    let mut states = vec![crate::RealVector::new(x0.to_vec())?];
    let mut actions = Vec::with_capacity(horizon);
    for k in 0..horizon {
        let x = states[k].as_slice().to_vec();
        let u_nom = nominal.act(&x, &mut nom_rng);
        let (u, wc, branch) = match filter {
            Some(f) => f.combined_action(&x, &u_nom, pi_safe, &mut filt_rng),
            None => (env.action_bounds().clamp(&u_nom), f64::NAN, Branch::Nominal),
        };
        let next = env.step(&x, &u, &mut env_rng).map_err(|e| Error::NonFinite {
            step: k,
            context: format!("step failed: {e}"),
        })?;
        let next = crate::RealVector::new(next).map_err(|e| Error::NonFinite {
            step: k,
            context: e.to_string(),
        })?;
        metrics.episode_return += env.reward(&x, &u);
        metrics.cumulative_cost += cost.eval(next.as_slice());
        if !env.is_safe(next.as_slice()) {
            metrics.violations += 1;
        }
        let d = distance(&u_nom, &u);
        if d > 0.0 {
            metrics.interventions += 1;
        }
        metrics.filter_distance.push(d);
        steps.push(StepDiagnostics {
            k,
            state: x,
            u_nominal: u_nom,
            u_filtered: u.clone(),
            worst_case: wc,
            branch,
        });
        actions.push(crate::RealVector::new(u)?);
        states.push(next);
    }
    Ok(FilteredRollout {
        trajectory: Trajectory { states, actions },
        metrics,
        steps,
    })
}

/// Per-step diagnostics as CSV: `k, x_*, u_nom_*, u_filt_*, worst_case,
/// branch`.
pub fn write_diagnostics_csv<W: Write>(out: W, steps: &[StepDiagnostics]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    if let Some(s) = steps.first() {
        let mut header = vec!["k".to_string()];
        header.extend((0..s.state.len()).map(|i| format!("x_{i}")));
        header.extend((0..s.u_nominal.len()).map(|i| format!("u_nom_{i}")));
        header.extend((0..s.u_filtered.len()).map(|i| format!("u_filt_{i}")));
        header.push("worst_case".into());
        header.push("branch".into());
        w.write_record(&header)?;
    }
    for s in steps {
        let mut row = vec![s.k.to_string()];
        row.extend(s.state.iter().map(|v| v.to_string()));
        row.extend(s.u_nominal.iter().map(|v| v.to_string()));
        row.extend(s.u_filtered.iter().map(|v| v.to_string()));
        row.push(s.worst_case.to_string());
        row.push(s.branch.as_str().to_string());
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests;
