use std::sync::atomic::AtomicU64;

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{spectral_radius_bound, Environment};
use crate::common::{Bounds, NoiseModel, RandomSource, RealVector};
use crate::error::{Error, Result};

/// Linear longitudinal aircraft pitch model.
///
/// State is `(alpha, q, theta)`: attack angle, pitch rate and pitch angle.
/// The single action is the elevator deflection. The continuous-time
/// matrices are discretized by forward Euler.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PitchConfig {
    pub dt: f64,
    pub a_continuous: [[f64; 3]; 3],
    pub b_continuous: [f64; 3],
    pub noise_std: [f64; 3],
    pub action_limit: f64,
    pub state_limits: [f64; 3],
    pub initial_theta: f64,
    pub initial_jitter_std: f64,
    /// Sign of the control term in the reward `-2 theta^2 + s * 0.02 u^2`.
    /// `-1` penalizes control effort; `+1` rewards it.
    pub reward_u_sign: f64,
}

impl Default for PitchConfig {
    fn default() -> Self {
        Self {
            dt: 0.02,
            a_continuous: [[-0.313, 56.7, 0.0], [-0.0139, -0.426, 0.0], [0.0, 56.7, 0.0]],
            b_continuous: [0.232, 0.0203, 0.0],
            noise_std: [1e-3; 3],
            action_limit: 1.4,
            state_limits: [10.0, 1.0, std::f64::consts::PI],
            initial_theta: -0.2,
            initial_jitter_std: 0.0,
            reward_u_sign: -1.0,
        }
    }
}

#[derive(Debug)]
pub struct PitchControlEnv {
    config: PitchConfig,
    a: [[f64; 3]; 3],
    b: [f64; 3],
    noise: NoiseModel,
    state_bounds: Bounds,
    action_bounds: Bounds,
    clamps: AtomicU64,
}

impl PitchControlEnv {
    pub fn new(config: PitchConfig) -> Result<Self> {
        let dt = config.dt;
        if !(dt > 0.0) {
            return Err(Error::invalid("pitch dt must be positive"));
        }
        let mut a = [[0.0; 3]; 3];
        let mut b = [0.0; 3];
        for i in 0..3 {
            for j in 0..3 {
                a[i][j] = if i == j { 1.0 } else { 0.0 } + dt * config.a_continuous[i][j];
            }
            b[i] = dt * config.b_continuous[i];
        }
        let rows: Vec<Vec<f64>> = a.iter().map(|r| r.to_vec()).collect();
        let rho = spectral_radius_bound(&rows, 8);
        if rho > 1.0 + 10.0 * dt {
            return Err(Error::invalid(format!(
                "discretized pitch dynamics unstable: spectral radius bound {rho}"
            )));
        }
        if !(config.action_limit > 0.0) {
            return Err(Error::invalid("pitch action limit must be positive"));
        }
        let noise = if config.noise_std.iter().all(|s| *s == 0.0) {
            NoiseModel::zero(3)
        } else {
            NoiseModel::gaussian(config.noise_std.to_vec())?
        };
        let state_bounds = Bounds::symmetric(&config.state_limits)?;
        let action_bounds = Bounds::symmetric(&[config.action_limit])?;
        Ok(Self {
            config,
            a,
            b,
            noise,
            state_bounds,
            action_bounds,
            clamps: AtomicU64::new(0),
        })
    }

    pub fn config(&self) -> &PitchConfig {
        &self.config
    }

    /// Discrete transition matrix `A`.
    pub fn a(&self) -> &[[f64; 3]; 3] {
        &self.a
    }

    /// Discrete input matrix `B`.
    pub fn b(&self) -> &[f64; 3] {
        &self.b
    }
}

impl Environment for PitchControlEnv {
    fn name(&self) -> &str {
        "pitch"
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
        (0..3)
            .map(|i| self.a[i][0] * x[0] + self.a[i][1] * x[1] + self.a[i][2] * x[2] + self.b[i] * u[0])
            .collect()
    }

    /// Safe iff the pitch angle does not exceed zero.
    fn is_safe(&self, x: &[f64]) -> bool {
        x[2] <= 0.0
    }

    fn initial_state(&self, rng: &mut RandomSource) -> RealVector {
        let mut x = vec![0.0, 0.0, self.config.initial_theta];
        if self.config.initial_jitter_std > 0.0 {
            for v in &mut x {
                let z: f64 = StandardNormal.sample(rng);
                *v += self.config.initial_jitter_std * z;
            }
        }
        RealVector::from_trusted(x)
    }

    fn reward(&self, x: &[f64], u: &[f64]) -> f64 {
        -2.0 * x[2] * x[2] + self.config.reward_u_sign * 0.02 * u[0] * u[0]
    }

    fn clamp_counter(&self) -> &AtomicU64 {
        &self.clamps
    }
}
