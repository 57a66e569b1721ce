use std::sync::Arc;

use super::RandomSource;

/// State feedback `x -> u`. Deterministic policies ignore `rng`.
pub trait Policy: Send + Sync {
    fn act(&self, x: &[f64], rng: &mut RandomSource) -> Vec<f64>;
}

impl<P: Policy + ?Sized> Policy for Arc<P> {
    fn act(&self, x: &[f64], rng: &mut RandomSource) -> Vec<f64> {
        (**self).act(x, rng)
    }
}

impl<P: Policy + ?Sized> Policy for &P {
    fn act(&self, x: &[f64], rng: &mut RandomSource) -> Vec<f64> {
        (**self).act(x, rng)
    }
}

/// Wraps a deterministic closure.
pub struct FnPolicy<F>(pub F);

impl<F> Policy for FnPolicy<F>
where
    F: Fn(&[f64]) -> Vec<f64> + Send + Sync,
{
    fn act(&self, x: &[f64], _rng: &mut RandomSource) -> Vec<f64> {
        (self.0)(x)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConstantPolicy(pub Vec<f64>);

impl Policy for ConstantPolicy {
    fn act(&self, _x: &[f64], _rng: &mut RandomSource) -> Vec<f64> {
        self.0.clone()
    }
}
