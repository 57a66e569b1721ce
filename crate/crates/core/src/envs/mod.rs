//! Ground-truth environments: aircraft pitch control, a double integrator,
//! and finite chain MDPs used as exact oracles.

use std::sync::atomic::{AtomicU64, Ordering};

use crate::common::{Bounds, NoiseModel, RandomSource, RealVector};
use crate::error::{Error, Result};

mod chain;
mod double_integrator;
mod pitch;

pub use chain::{DiscreteChainMDP, IntervalChainMdp};
pub use double_integrator::{DoubleIntegratorConfig, DoubleIntegratorEnv};
pub use pitch::{PitchConfig, PitchControlEnv};

/// Discrete-time system `x' = f(x, u) + w` with a fixed noise law and a
/// designated safe set.
pub trait Environment: Send + Sync {
    fn name(&self) -> &str;
    fn state_bounds(&self) -> &Bounds;
    fn action_bounds(&self) -> &Bounds;
    fn noise(&self) -> &NoiseModel;

    /// Deterministic part of the transition.
    fn mean_step(&self, x: &[f64], u: &[f64]) -> Vec<f64>;

    fn is_safe(&self, x: &[f64]) -> bool;

    fn initial_state(&self, rng: &mut RandomSource) -> RealVector;

    fn reward(&self, _x: &[f64], _u: &[f64]) -> f64 {
        0.0
    }

    /// Counter of out-of-box inputs that `step` clamped.
    fn clamp_counter(&self) -> &AtomicU64;

    fn state_dim(&self) -> usize {
        self.state_bounds().dim()
    }

    fn action_dim(&self) -> usize {
        self.action_bounds().dim()
    }

    /// One transition: deterministic dynamics plus a single noise draw.
    fn step(&self, x: &[f64], u: &[f64], rng: &mut RandomSource) -> Result<Vec<f64>> {
        if x.len() != self.state_dim() || u.len() != self.action_dim() {
            return Err(Error::invalid(format!(
                "{}: expected state dim {} and action dim {}",
                self.name(),
                self.state_dim(),
                self.action_dim()
            )));
        }
        if x.iter().chain(u).any(|v| !v.is_finite()) {
            return Err(Error::invalid(format!("{}: non-finite input", self.name())));
        }
        let mut xc = x.to_vec();
        let mut uc = u.to_vec();
        let moved_x = self.state_bounds().clamp_in_place(&mut xc);
        let moved_u = self.action_bounds().clamp_in_place(&mut uc);
        if moved_x || moved_u {
            self.clamp_counter().fetch_add(1, Ordering::Relaxed);
        }
        let mut next = self.mean_step(&xc, &uc);
        let mut w = vec![0.0; next.len()];
        self.noise().sample_into(rng, &mut w);
        for (n, wi) in next.iter_mut().zip(&w) {
            *n += wi;
        }
        Ok(next)
    }

    fn clamp_count(&self) -> u64 {
        self.clamp_counter().load(Ordering::Relaxed)
    }
}

/// Upper bound on the spectral radius of a square matrix via
/// `rho(A) <= ||A^k||^(1/k)`.
pub(crate) fn spectral_radius_bound(a: &[Vec<f64>], power_of_two: u32) -> f64 {
    let n = a.len();
    let mut m: Vec<Vec<f64>> = a.to_vec();
    let mut log_scale = 0.0;
    for _ in 0..power_of_two {
        let mut sq = vec![vec![0.0; n]; n];
        for i in 0..n {
            for k in 0..n {
                let mik = m[i][k];
                if mik == 0.0 {
                    continue;
                }
                for j in 0..n {
                    sq[i][j] += mik * m[k][j];
                }
            }
        }
        // renormalize to avoid overflow; track log of the scale
        let f: f64 = sq.iter().flatten().map(|v| v * v).sum::<f64>().sqrt();
        if f == 0.0 {
            return 0.0;
        }
        log_scale = 2.0 * log_scale + f.ln();
        for v in sq.iter_mut().flatten() {
            *v /= f;
        }
        m = sq;
    }
    let k = 2f64.powi(power_of_two as i32);
    (log_scale / k).exp()
}
