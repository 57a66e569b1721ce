use std::sync::Arc;

use super::{CalibratedModel, Prediction};
use crate::envs::Environment;
use crate::error::{Error, Result};

/// True dynamics plus a bounded deterministic bias, with a constant
/// per-dimension `sigma`.
///
/// The bias never exceeds `bias_fraction * beta * sigma`, so the model set
/// contains the truth everywhere.
pub struct OraclePerturbedModel {
    truth: Arc<dyn Environment>,
    sigma: Vec<f64>,
    beta: f64,
    bias_fraction: f64,
}

impl OraclePerturbedModel {
    pub fn new(truth: Arc<dyn Environment>, sigma: Vec<f64>, beta: f64, bias_fraction: f64) -> Result<Self> {
        if sigma.len() != truth.state_dim() || sigma.iter().any(|s| !(*s >= 0.0)) {
            return Err(Error::invalid(
                "oracle sigma must be non-negative with one entry per state",
            ));
        }
        if !(beta >= 0.0) || !beta.is_finite() {
            return Err(Error::invalid("beta must be finite and non-negative"));
        }
        if !(0.0..=1.0).contains(&bias_fraction) {
            return Err(Error::invalid("bias fraction must lie in [0, 1]"));
        }
        Ok(Self {
            truth,
            sigma,
            beta,
            bias_fraction,
        })
    }

    pub fn sigma(&self) -> &[f64] {
        &self.sigma
    }

    pub fn bias_fraction(&self) -> f64 {
        self.bias_fraction
    }

    pub fn bias(&self, x: &[f64], u: &[f64]) -> Vec<f64> {
        let phase: f64 = x.iter().chain(u).enumerate().map(|(i, v)| (i as f64 + 1.0) * v).sum();
        self.sigma
            .iter()
            .enumerate()
            .map(|(i, s)| self.bias_fraction * self.beta * s * (3.0 * phase + i as f64).sin())
            .collect()
    }
}

impl CalibratedModel for OraclePerturbedModel {
    fn state_dim(&self) -> usize {
        self.truth.state_dim()
    }

    fn action_dim(&self) -> usize {
        self.truth.action_dim()
    }

    fn predict(&self, x: &[f64], u: &[f64]) -> Prediction {
        let mut mean = self.truth.mean_step(x, u);
        if self.bias_fraction > 0.0 {
            for (m, b) in mean.iter_mut().zip(self.bias(x, u)) {
                *m += b;
            }
        }
        Prediction {
            mean,
            std: self.sigma.clone(),
            out_of_range: false,
        }
    }

    fn beta(&self) -> f64 {
        self.beta
    }
}

/// Exactly known deterministic part: `sigma = 0`, so the model set is the
/// single function `f`.
pub struct KnownModel<F> {
    state_dim: usize,
    action_dim: usize,
    f: F,
}

impl<F> KnownModel<F>
where
    F: Fn(&[f64], &[f64]) -> Vec<f64> + Send + Sync,
{
    pub fn new(state_dim: usize, action_dim: usize, f: F) -> Self {
        Self {
            state_dim,
            action_dim,
            f,
        }
    }
}

impl<F> CalibratedModel for KnownModel<F>
where
    F: Fn(&[f64], &[f64]) -> Vec<f64> + Send + Sync,
{
    fn state_dim(&self) -> usize {
        self.state_dim
    }

    fn action_dim(&self) -> usize {
        self.action_dim
    }

    fn predict(&self, x: &[f64], u: &[f64]) -> Prediction {
        Prediction {
            mean: (self.f)(x, u),
            std: vec![0.0; self.state_dim],
            out_of_range: false,
        }
    }

    fn beta(&self) -> f64 {
        0.0
    }
}
