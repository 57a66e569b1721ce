//! Calibrated model sets `{ f : |f - mu| <= beta * sigma }`.
//!
//! Two implementations: an oracle-perturbed wrapper around the true
//! dynamics (calibrated by construction) and a learned deterministic
//! ensemble whose member disagreement provides `sigma`.

use rand::Rng;

use crate::common::{Bounds, RandomSource};
use crate::error::{Error, Result};

mod buffer;
mod ensemble;
mod mlp;
mod oracle;

pub use buffer::{ReplayBuffer, Transition};
pub use ensemble::{EnsembleConfig, EnsembleModel, FitConfig, TrainingReport};
pub use mlp::{Adam, Mlp};
pub use oracle::{KnownModel, OraclePerturbedModel};

/// Floor added to `sigma` when forming calibration ratios.
pub const SIGMA_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    /// Query lies outside the range seen in training; `std` may be
    /// unreliable there.
    pub out_of_range: bool,
}

pub trait CalibratedModel: Send + Sync {
    fn state_dim(&self) -> usize;
    fn action_dim(&self) -> usize;
    fn predict(&self, x: &[f64], u: &[f64]) -> Prediction;
    fn beta(&self) -> f64;
}

/// `mu(x, u) + beta * diag(sigma(x, u)) * eta + omega`.
pub fn hallucinated_step(
    model: &dyn CalibratedModel,
    x: &[f64],
    u: &[f64],
    eta: &[f64],
    omega: &[f64],
) -> Result<Vec<f64>> {
    let d = model.state_dim();
    if eta.len() != d || omega.len() != d {
        return Err(Error::invalid(
            "hallucination and noise vectors must match the state dimension",
        ));
    }
    if eta.iter().any(|e| !(e.abs() <= 1.0)) {
        return Err(Error::invalid("hallucination vector outside [-1, 1]^d"));
    }
    let p = model.predict(x, u);
    Ok(hallucinate(&p, model.beta(), eta, omega))
}

pub fn hallucinate(p: &Prediction, beta: f64, eta: &[f64], omega: &[f64]) -> Vec<f64> {
    p.mean
        .iter()
        .zip(&p.std)
        .zip(eta.iter().zip(omega))
        .map(|((m, s), (e, w))| m + beta * s * e + w)
        .collect()
}

/// Whether `|truth - mu| <= beta * sigma` holds element-wise at `(x, u)`.
pub fn is_covered(model: &dyn CalibratedModel, truth: &[f64], x: &[f64], u: &[f64]) -> bool {
    let p = model.predict(x, u);
    let beta = model.beta();
    truth
        .iter()
        .zip(p.mean.iter().zip(&p.std))
        .all(|(t, (m, s))| (t - m).abs() <= beta * s)
}

/// Fraction of uniformly sampled `(x, u)` at which the model set contains
/// the true transition.
pub fn check_calibration<F>(
    model: &dyn CalibratedModel,
    truth: F,
    states: &Bounds,
    actions: &Bounds,
    sample_count: usize,
    rng: &mut RandomSource,
) -> f64
where
    F: Fn(&[f64], &[f64]) -> Vec<f64>,
{
    if sample_count == 0 {
        return 1.0;
    }
    let mut hits = 0usize;
    for _ in 0..sample_count {
        let x = sample_box(states, rng);
        let u = sample_box(actions, rng);
        if is_covered(model, &truth(&x, &u), &x, &u) {
            hits += 1;
        }
    }
    hits as f64 / sample_count as f64
}

/// Coverage over an explicit list of `(x, u)` pairs.
pub fn coverage_on<F>(model: &dyn CalibratedModel, truth: F, pairs: &[(Vec<f64>, Vec<f64>)]) -> f64
where
    F: Fn(&[f64], &[f64]) -> Vec<f64>,
{
    if pairs.is_empty() {
        return 1.0;
    }
    let hits = pairs
        .iter()
        .filter(|(x, u)| is_covered(model, &truth(x, u), x, u))
        .count();
    hits as f64 / pairs.len() as f64
}

/// Smallest `beta` covering the `quantile` fraction of the given pairs:
/// the empirical quantile of `max_i |truth_i - mu_i| / (sigma_i + floor)`.
pub fn fit_beta<F>(model: &dyn CalibratedModel, truth: F, pairs: &[(Vec<f64>, Vec<f64>)], quantile: f64) -> Result<f64>
where
    F: Fn(&[f64], &[f64]) -> Vec<f64>,
{
    if pairs.is_empty() {
        return Err(Error::invalid("beta fitting needs at least one held-out pair"));
    }
    if !(quantile > 0.0 && quantile <= 1.0) {
        return Err(Error::invalid("quantile must lie in (0, 1]"));
    }
    let mut ratios: Vec<f64> = pairs
        .iter()
        .map(|(x, u)| {
            let p = model.predict(x, u);
            truth(x, u)
                .iter()
                .zip(p.mean.iter().zip(&p.std))
                .map(|(t, (m, s))| (t - m).abs() / (s + SIGMA_FLOOR))
                .fold(0.0, f64::max)
        })
        .collect();
    ratios.sort_by(f64::total_cmp);
    let rank = ((quantile * ratios.len() as f64).ceil() as usize).clamp(1, ratios.len());
    Ok(ratios[rank - 1])
}

pub(crate) fn sample_box(b: &Bounds, rng: &mut RandomSource) -> Vec<f64> {
    b.lower()
        .iter()
        .zip(b.upper())
        .map(|(l, u)| if u > l { rng.gen_range(*l..=*u) } else { *l })
        .collect()
}
