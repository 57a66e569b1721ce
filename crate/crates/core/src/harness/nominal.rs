use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::common::cem::{best_indices, elite_count, GaussianSearch};
use crate::common::{Bounds, Policy, RandomSource};
use crate::error::{Error, Result};
use crate::model::CalibratedModel;

pub type RewardFn = Arc<dyn Fn(&[f64], &[f64]) -> f64 + Send + Sync>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PlannerConfig {
    pub horizon: usize,
    pub particles: usize,
    pub iterations: usize,
    pub elite_fraction: f64,
    /// Initial std as a fraction of the action range.
    pub init_std: f64,
}

impl Default for PlannerConfig {
    fn default() -> Self {
        Self {
            horizon: 20,
            particles: 64,
            iterations: 4,
            elite_fraction: 0.125,
            init_std: 0.5,
        }
    }
}

impl PlannerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.horizon == 0 || self.particles < 2 || self.iterations == 0 {
            return Err(Error::invalid(
                "planner needs a horizon, two particles and one iteration",
            ));
        }
        if !(self.elite_fraction > 0.0 && self.elite_fraction <= 1.0) || !(self.init_std > 0.0) {
            return Err(Error::invalid(
                "planner elite fraction must lie in (0, 1] and init_std be positive",
            ));
        }
        Ok(())
    }
}

/// Receding-horizon CEM on the model mean, maximizing the undiscounted
/// reward over open-loop action sequences. Ignores the constraint.
pub struct CemPlanner {
    model: Arc<dyn CalibratedModel>,
    reward: RewardFn,
    bounds: Bounds,
    config: PlannerConfig,
}

impl CemPlanner {
    pub fn new(
        model: Arc<dyn CalibratedModel>,
        reward: RewardFn,
        bounds: Bounds,
        config: PlannerConfig,
    ) -> Result<Self> {
        config.validate()?;
        if bounds.dim() != model.action_dim() {
            return Err(Error::invalid("planner action box does not match the model"));
        }
        Ok(Self {
            model,
            reward,
            bounds,
            config,
        })
    }

    fn score(&self, x0: &[f64], seq: &[f64]) -> f64 {
        let du = self.bounds.dim();
        let mut x = x0.to_vec();
        let mut total = 0.0;
        for u in seq.chunks(du) {
            total += (self.reward)(&x, u);
            x = self.model.predict(&x, u).mean;
            if x.iter().any(|v| !v.is_finite()) {
                return f64::NEG_INFINITY;
            }
        }
        total
    }

    /// First action of the best sequence found.
    pub fn plan(&self, x: &[f64], rng: &mut RandomSource) -> Vec<f64> {
        let du = self.bounds.dim();
        let h = self.config.horizon;
        let mid = self.bounds.center();
        let mean: Vec<f64> = (0..h).flat_map(|_| mid.iter().copied()).collect();
        let std: Vec<f64> = (0..h)
            .flat_map(|_| (0..du).map(|i| self.config.init_std * self.bounds.width(i)))
            .collect();
        let mut search = GaussianSearch::new(mean, std, 1e-6);
        let k = elite_count(self.config.particles, self.config.elite_fraction);
        let clip = |seq: Vec<f64>| -> Vec<f64> { seq.chunks(du).flat_map(|u| self.bounds.clamp(u)).collect() };
        let mut best: (f64, Vec<f64>) = (f64::NEG_INFINITY, search.mean.clone());
        for _ in 0..self.config.iterations {
            let mut cands = vec![clip(search.mean.clone())];
            while cands.len() < self.config.particles {
                cands.push(clip(search.sample(rng)));
            }
            let neg: Vec<f64> = cands.iter().map(|c| -self.score(x, c)).collect();
            let order = best_indices(&neg, k);
            if -neg[order[0]] > best.0 {
                best = (-neg[order[0]], cands[order[0]].clone());
            }
            let refs: Vec<&[f64]> = order.iter().map(|i| cands[*i].as_slice()).collect();
            search.refit(&refs);
        }
        best.1[..du].to_vec()
    }
}

impl Policy for CemPlanner {
    fn act(&self, x: &[f64], rng: &mut RandomSource) -> Vec<f64> {
        self.plan(x, rng)
    }
}

/// Uniform over the action box; the warm-up policy.
pub struct UniformPolicy(pub Bounds);

impl Policy for UniformPolicy {
    fn act(&self, _x: &[f64], rng: &mut RandomSource) -> Vec<f64> {
        use rand::Rng;
        (0..self.0.dim())
            .map(|i| {
                let (l, u) = (self.0.lower()[i], self.0.upper()[i]);
                if u > l {
                    rng.gen_range(l..u)
                } else {
                    l
                }
            })
            .collect()
    }
}
