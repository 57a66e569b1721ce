use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::ParametricPolicy;
use crate::common::cem::{best_indices, elite_count, GaussianSearch};
use crate::common::{truncation_horizon, NoiseModel, RandomSource};
use crate::error::{Error, Result};
use crate::model::{hallucinate, CalibratedModel};
use crate::objective::ImmediateCost;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CemMinimaxConfig {
    pub population: usize,
    pub elite_fraction: f64,
    /// Total optimizer steps, policy and adversary together.
    pub iterations: usize,
    pub variance_floor: f64,
    /// Policy steps per adversary step.
    pub policy_steps: usize,
    pub adversary_steps: usize,
    pub init_std: f64,
    pub eta_init_std: f64,
    /// Roll-outs per initial state for every candidate.
    pub rollouts: usize,
    /// Truncation length; by default the tail is cut below 1e-3 of the
    /// cost magnitude.
    pub horizon: Option<usize>,
}

impl Default for CemMinimaxConfig {
    fn default() -> Self {
        Self {
            population: 64,
            elite_fraction: 0.125,
            iterations: 30,
            variance_floor: 1e-6,
            policy_steps: 5,
            adversary_steps: 1,
            init_std: 0.5,
            eta_init_std: 1.0,
            rollouts: 4,
            horizon: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct CemMinimaxResult {
    pub policy: ParametricPolicy,
    /// Strongest hallucination policy found against the returned policy.
    pub eta: ParametricPolicy,
    /// Monte-Carlo cost of `policy` against `eta`.
    pub value: f64,
    /// Best score of every step; policy steps minimize, adversary steps
    /// maximize.
    pub history: Vec<f64>,
}

struct Evaluator<'a> {
    model: &'a dyn CalibratedModel,
    noise: &'a NoiseModel,
    cost: &'a ImmediateCost,
    gamma: f64,
    x0: &'a [Vec<f64>],
    rollouts: usize,
    horizon: usize,
}

impl Evaluator<'_> {
    /// Mean truncated discounted cost. Streams depend only on `rng` and the
    /// roll-out index, so every candidate sees the same noise.
    fn score(&self, policy: &ParametricPolicy, eta: &ParametricPolicy, rng: &RandomSource) -> f64 {
        let beta = self.model.beta();
        let mut phi = Vec::new();
        let mut phi_eta = Vec::new();
        let mut omega = vec![0.0; self.noise.dim()];
        let mut total = 0.0;
        for (i, x0) in self.x0.iter().enumerate() {
            for r in 0..self.rollouts {
                let mut stream = rng.fork((i * self.rollouts + r) as u64);
                let mut x = x0.clone();
                let mut acc = self.cost.eval(&x);
                let mut w = 1.0;
                for _ in 0..self.horizon {
                    let u = policy.eval_with(&x, &mut phi);
                    let e = eta.eval_with(&x, &mut phi_eta);
                    self.noise.sample_into(&mut stream, &mut omega);
                    let p = self.model.predict(&x, &u);
                    x = hallucinate(&p, beta, &e, &omega);
                    if x.iter().any(|v| !v.is_finite()) {
                        return f64::NAN;
                    }
                    w *= self.gamma;
                    acc += w * self.cost.eval(&x);
                }
                total += acc;
            }
        }
        total / (self.x0.len() * self.rollouts) as f64
    }
}

/// One CEM step over `search`; `sign = 1` minimizes the score, `-1`
/// maximizes it. Candidate 0 is the current mean. Returns the best raw
/// score and its parameters.
fn cem_step<F>(
    search: &mut GaussianSearch,
    population: usize,
    elite_fraction: f64,
    sign: f64,
    rng: &mut RandomSource,
    step: usize,
    score: F,
) -> Result<(f64, Vec<f64>)>
where
    F: Fn(&[f64]) -> f64 + Sync,
{
    let mut candidates = Vec::with_capacity(population);
    candidates.push(search.mean.clone());
    while candidates.len() < population {
        candidates.push(search.sample(rng));
    }
    let raw: Vec<f64> = candidates.par_iter().map(|c| score(c)).collect();
    let ranked: Vec<f64> = raw
        .iter()
        .map(|s| if s.is_finite() { sign * s } else { f64::INFINITY })
        .collect();
    if ranked.iter().all(|s| !s.is_finite()) {
        return Err(Error::NonFinite {
            step,
            context: "every minimax candidate diverged".into(),
        });
    }
    let elites = best_indices(&ranked, elite_count(population, elite_fraction));
    let best = elites[0];
    let refs: Vec<&[f64]> = elites
        .iter()
        .filter(|i| ranked[**i].is_finite())
        .map(|i| candidates[*i].as_slice())
        .collect();
    search.refit(&refs);
    Ok((raw[best], candidates[best].clone()))
}

/// Alternating population search: the policy minimizes the Monte-Carlo
/// pessimistic cost against the current hallucination policy, which in
/// turn maximizes it. `policy` and `eta` fix the two parameter classes and
/// the starting means; `eta` must act on the unit box.
#[allow(clippy::too_many_arguments)]
pub fn cem_minimax_policy(
    model: &dyn CalibratedModel,
    noise: &NoiseModel,
    cost: &ImmediateCost,
    gamma: f64,
    x0: &[Vec<f64>],
    policy: &ParametricPolicy,
    eta: &ParametricPolicy,
    config: &CemMinimaxConfig,
    rng: &mut RandomSource,
) -> Result<CemMinimaxResult> {
    if config.population < 16 {
        return Err(Error::invalid("minimax search needs a population of at least 16"));
    }
    if x0.is_empty() || config.rollouts == 0 {
        return Err(Error::invalid("minimax search needs initial states and roll-outs"));
    }
    let dx = model.state_dim();
    if eta.bounds().dim() != dx
        || eta
            .bounds()
            .lower()
            .iter()
            .chain(eta.bounds().upper())
            .any(|b| b.abs() != 1.0)
    {
        return Err(Error::invalid("hallucination class must map into [-1, 1]^state_dim"));
    }
    if policy.bounds().dim() != model.action_dim() || noise.dim() != dx {
        return Err(Error::invalid("policy, noise and model dimensions differ"));
    }
    let horizon = match config.horizon {
        Some(h) => h,
        None => truncation_horizon(gamma, cost.magnitude(), 1e-3 * cost.magnitude().max(1e-12))?,
    };
    let eval = Evaluator {
        model,
        noise,
        cost,
        gamma,
        x0,
        rollouts: config.rollouts,
        horizon,
    };
    let floor = config.variance_floor.max(0.0).sqrt();
    let mut pi_search = GaussianSearch::new(
        policy.params().to_vec(),
        vec![config.init_std; policy.n_params()],
        floor,
    );
    let mut eta_search = GaussianSearch::new(eta.params().to_vec(), vec![config.eta_init_std; eta.n_params()], floor);
    let mut pi = policy.clone();
    let mut adversary = eta.clone();
    let cycle = config.policy_steps + config.adversary_steps;
    let mut history = Vec::with_capacity(config.iterations + 1);
    for it in 0..config.iterations {
        let crn = rng.fork(it as u64);
        let policy_turn = cycle == 0 || it % cycle < config.policy_steps;
        if policy_turn {
            let (best, _) = cem_step(
                &mut pi_search,
                config.population,
                config.elite_fraction,
                1.0,
                rng,
                it,
                |p| {
                    pi.with_params(p.to_vec())
                        .map_or(f64::NAN, |c| eval.score(&c, &adversary, &crn))
                },
            )?;
            pi = pi.with_params(pi_search.mean.clone())?;
            history.push(best);
        } else {
            let (best, _) = cem_step(
                &mut eta_search,
                config.population,
                config.elite_fraction,
                -1.0,
                rng,
                it,
                |p| {
                    adversary
                        .with_params(p.to_vec())
                        .map_or(f64::NAN, |c| eval.score(&pi, &c, &crn))
                },
            )?;
            adversary = adversary.with_params(eta_search.mean.clone())?;
            history.push(best);
        }
    }
    // final adversary step against the returned policy
    let crn = rng.fork(config.iterations as u64);
    let (value, params) = cem_step(
        &mut eta_search,
        config.population,
        config.elite_fraction,
        -1.0,
        rng,
        config.iterations,
        |p| {
            adversary
                .with_params(p.to_vec())
                .map_or(f64::NAN, |c| eval.score(&pi, &c, &crn))
        },
    )?;
    history.push(value);
    Ok(CemMinimaxResult {
        policy: pi,
        eta: adversary.with_params(params)?,
        value,
        history,
    })
}
