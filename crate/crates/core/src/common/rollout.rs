use serde::{Deserialize, Serialize};

use super::{RandomSource, RealVector};
use crate::error::{Error, Result};

/// States `x_0..=x_K` and the actions `u_0..u_{K-1}` that produced them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub states: Vec<RealVector>,
    pub actions: Vec<RealVector>,
}

impl Trajectory {
    pub fn horizon(&self) -> usize {
        self.actions.len()
    }

    pub fn initial(&self) -> &RealVector {
        &self.states[0]
    }

    pub fn last(&self) -> &RealVector {
        self.states.last().expect("trajectory holds at least x_0")
    }
}

/// Rolls `policy` forward through `step` for exactly `horizon` transitions.
///
/// `step` returns the raw next state; any non-finite entry aborts the
/// roll-out with the offending step index.
pub fn rollout<S, P>(
    mut step: S,
    mut policy: P,
    x0: &RealVector,
    horizon: usize,
    rng: &mut RandomSource,
) -> Result<Trajectory>
where
    S: FnMut(&RealVector, &RealVector, &mut RandomSource) -> Result<Vec<f64>>,
    P: FnMut(&RealVector, &mut RandomSource) -> Result<RealVector>,
{
    let mut states = Vec::with_capacity(horizon + 1);
    let mut actions = Vec::with_capacity(horizon);
    states.push(x0.clone());
    for k in 0..horizon {
        let x = &states[k];
        let u = policy(x, rng).map_err(|e| Error::NonFinite {
            step: k,
            context: format!("policy failed: {e}"),
        })?;
        let next = step(x, &u, rng).map_err(|e| Error::NonFinite {
            step: k,
            context: format!("step failed: {e}"),
        })?;
        let next = RealVector::new(next).map_err(|e| Error::NonFinite {
            step: k,
            context: e.to_string(),
        })?;
        actions.push(u);
        states.push(next);
    }
    Ok(Trajectory { states, actions })
}

fn check_gamma(gamma: f64) -> Result<()> {
    if gamma > 0.0 && gamma < 1.0 {
        Ok(())
    } else {
        Err(Error::invalid(format!("discount {gamma} outside (0, 1)")))
    }
}

/// `sum_k gamma^k r(x_k, u_k)` over the trajectory's transitions.
pub fn discounted_return<R>(traj: &Trajectory, reward: R, gamma: f64) -> Result<f64>
where
    R: Fn(&[f64], &[f64]) -> f64,
{
    check_gamma(gamma)?;
    let mut total = 0.0;
    let mut weight = 1.0;
    for (x, u) in traj.states.iter().zip(&traj.actions) {
        total += weight * reward(x, u);
        weight *= gamma;
    }
    Ok(total)
}

/// `sum_k gamma^k c(x_k)` over every state of the trajectory, `x_0` included.
pub fn discounted_cost<C>(traj: &Trajectory, cost: C, gamma: f64) -> Result<f64>
where
    C: Fn(&[f64]) -> f64,
{
    check_gamma(gamma)?;
    let mut total = 0.0;
    let mut weight = 1.0;
    for x in &traj.states {
        total += weight * cost(x);
        weight *= gamma;
    }
    Ok(total)
}

/// Smallest horizon whose geometric tail `gamma^K c_max / (1 - gamma)` is
/// below `tol`.
pub fn truncation_horizon(gamma: f64, c_max: f64, tol: f64) -> Result<usize> {
    check_gamma(gamma)?;
    if !(tol > 0.0) {
        return Err(Error::invalid("truncation tolerance must be positive"));
    }
    let c_max = c_max.abs();
    if c_max == 0.0 {
        return Ok(0);
    }
    let ratio = tol * (1.0 - gamma) / c_max;
    if ratio >= 1.0 {
        return Ok(0);
    }
    let k = (ratio.ln() / gamma.ln()).floor() as usize + 1;
    Ok(k)
}

/// Bound on the ignored tail after `k` steps for `|c| <= c_max`.
pub fn tail_bound(gamma: f64, c_max: f64, k: usize) -> f64 {
    gamma.powi(k as i32) * c_max.abs() / (1.0 - gamma)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn constant(dim: usize, value: f64, len: usize) -> Trajectory {
        Trajectory {
            states: vec![RealVector::filled(dim, value); len + 1],
            actions: vec![RealVector::zeros(1); len],
        }
    }

    #[test]
    fn zero_dynamics_stay_at_origin() {
        let mut rng = RandomSource::new(0, 0);
        let traj = rollout(
            |_x, _u, _r| Ok(vec![0.0, 0.0]),
            |_x, _r| Ok(RealVector::zeros(1)),
            &RealVector::zeros(2),
            5,
            &mut rng,
        )
        .unwrap();
        assert_eq!(traj.states.len(), 6);
        assert_eq!(traj.horizon(), 5);
        assert!(traj.states.iter().all(|s| s.iter().all(|v| *v == 0.0)));
    }

    #[test]
    fn identity_dynamics_hold_x0() {
        let mut rng = RandomSource::new(0, 0);
        let x0 = RealVector::new(vec![0.3, -1.2]).unwrap();
        let traj = rollout(
            |x, _u, _r| Ok(x.to_vec()),
            |_x, _r| Ok(RealVector::zeros(1)),
            &x0,
            4,
            &mut rng,
        )
        .unwrap();
        assert!(traj.states.iter().all(|s| *s == x0));
    }

    #[test]
    fn non_finite_state_names_step() {
        let mut rng = RandomSource::new(0, 0);
        let err = rollout(
            |x, _u, _r| Ok(vec![if x[0] > 1.5 { f64::NAN } else { x[0] + 1.0 }]),
            |_x, _r| Ok(RealVector::zeros(1)),
            &RealVector::zeros(1),
            10,
            &mut rng,
        )
        .unwrap_err();
        match err {
            Error::NonFinite { step, .. } => assert_eq!(step, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn geometric_series_limit() {
        let gamma = 0.99;
        let k = truncation_horizon(gamma, 1.0, 1e-6).unwrap();
        assert!(tail_bound(gamma, 1.0, k) < 1e-6);
        assert!(tail_bound(gamma, 1.0, k - 1) >= 1e-6);
        let traj = constant(1, 0.0, k);
        let total = discounted_return(&traj, |_, _| 1.0, gamma).unwrap();
        assert!((total - 100.0).abs() < 1e-6);
        assert_eq!(discounted_return(&traj, |_, _| 0.0, gamma).unwrap(), 0.0);
    }

    #[test]
    fn indicator_cost_examples() {
        let mut traj = constant(1, 0.0, 5);
        let unsafe_cost = |x: &[f64]| if x[0] > 0.0 { 1.0 } else { 0.0 };
        assert_eq!(discounted_cost(&traj, unsafe_cost, 0.99).unwrap(), 0.0);
        traj.states[0] = RealVector::filled(1, 1.0);
        assert_eq!(discounted_cost(&traj, unsafe_cost, 0.99).unwrap(), 1.0);
        traj.states[0] = RealVector::zeros(1);
        traj.states[2] = RealVector::filled(1, 1.0);
        let c = discounted_cost(&traj, unsafe_cost, 0.99).unwrap();
        assert!((c - 0.9801).abs() < 1e-15);
    }

    #[test]
    fn gamma_outside_unit_interval_rejected() {
        let traj = constant(1, 0.0, 2);
        assert!(discounted_cost(&traj, |_| 1.0, 1.0).is_err());
        assert!(discounted_return(&traj, |_, _| 1.0, 0.0).is_err());
    }
}
