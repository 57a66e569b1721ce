use std::sync::atomic::AtomicU64;

use serde::{Deserialize, Serialize};

use super::Environment;
use crate::common::{Bounds, NoiseModel, RandomSource, RealVector};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DoubleIntegratorConfig {
    pub dt: f64,
    pub noise_std: [f64; 2],
    pub action_limit: f64,
    /// Unsafe iff `|position| > position_limit`.
    pub position_limit: f64,
    pub state_limits: [f64; 2],
}

impl Default for DoubleIntegratorConfig {
    fn default() -> Self {
        Self {
            dt: 0.1,
            noise_std: [0.0, 0.0],
            action_limit: 1.0,
            position_limit: 1.0,
            state_limits: [10.0, 10.0],
        }
    }
}

/// Exact zero-order-hold double integrator, state `(position, velocity)`.
#[derive(Debug)]
pub struct DoubleIntegratorEnv {
    config: DoubleIntegratorConfig,
    noise: NoiseModel,
    state_bounds: Bounds,
    action_bounds: Bounds,
    clamps: AtomicU64,
}

impl DoubleIntegratorEnv {
    pub fn new(config: DoubleIntegratorConfig) -> Result<Self> {
        if !(config.dt > 0.0) || !(config.action_limit > 0.0) || !(config.position_limit > 0.0) {
            return Err(Error::invalid(
                "double integrator dt, action limit and position limit must be positive",
            ));
        }
        let noise = if config.noise_std.iter().all(|s| *s == 0.0) {
            NoiseModel::zero(2)
        } else {
            NoiseModel::gaussian(config.noise_std.to_vec())?
        };
        Ok(Self {
            state_bounds: Bounds::symmetric(&config.state_limits)?,
            action_bounds: Bounds::symmetric(&[config.action_limit])?,
            config,
            noise,
            clamps: AtomicU64::new(0),
        })
    }

    pub fn with_noise(mut self, noise: NoiseModel) -> Result<Self> {
        if noise.dim() != 2 {
            return Err(Error::invalid("double integrator noise must be 2-dimensional"));
        }
        self.noise = noise;
        Ok(self)
    }

    pub fn config(&self) -> &DoubleIntegratorConfig {
        &self.config
    }
}

impl Environment for DoubleIntegratorEnv {
    fn name(&self) -> &str {
        "double-integrator"
    }

    fn state_bounds(&self) -> &Bounds {
        &self.state_bounds
    }

    fn action_bounds(&self) -> &Bounds {
        &self.action_bounds
    }

    fn noise(&self) -> &NoiseModel {
        &self.noise
    }

    fn mean_step(&self, x: &[f64], u: &[f64]) -> Vec<f64> {
        let dt = self.config.dt;
        vec![x[0] + dt * x[1] + 0.5 * dt * dt * u[0], x[1] + dt * u[0]]
    }

    fn is_safe(&self, x: &[f64]) -> bool {
        x[0].abs() <= self.config.position_limit
    }

    /// Starts at rest at `(-1, 0)`.
    fn initial_state(&self, _rng: &mut RandomSource) -> RealVector {
        RealVector::from_trusted(vec![-1.0, 0.0])
    }

    fn clamp_counter(&self) -> &AtomicU64 {
        &self.clamps
    }
}
