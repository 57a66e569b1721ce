use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::RealVector;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NoiseKind {
    GaussianDiagonal,
    UniformBox,
    Zero,
}

/// Zero-mean additive process noise.
///
/// `scale` is the per-dimension standard deviation for Gaussian noise and
/// the half-width for uniform noise; it is ignored (but fixes the dimension)
/// for `Zero`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseModel {
    pub kind: NoiseKind,
    pub scale: RealVector,
}

impl NoiseModel {
    pub fn new(kind: NoiseKind, scale: Vec<f64>) -> Result<Self> {
        let scale = RealVector::new(scale)?;
        if scale.iter().any(|s| *s < 0.0) {
            return Err(Error::invalid("noise scale must be non-negative"));
        }
        Ok(Self { kind, scale })
    }

    pub fn zero(dim: usize) -> Self {
        Self {
            kind: NoiseKind::Zero,
            scale: RealVector::zeros(dim),
        }
    }

    pub fn gaussian(std: Vec<f64>) -> Result<Self> {
        Self::new(NoiseKind::GaussianDiagonal, std)
    }

    pub fn uniform(half_width: Vec<f64>) -> Result<Self> {
        Self::new(NoiseKind::UniformBox, half_width)
    }

    pub fn dim(&self) -> usize {
        self.scale.dim()
    }

    pub fn is_zero(&self) -> bool {
        self.kind == NoiseKind::Zero || self.scale.iter().all(|s| *s == 0.0)
    }

    /// Per-dimension variance.
    pub fn variance(&self) -> Vec<f64> {
        match self.kind {
            NoiseKind::Zero => vec![0.0; self.dim()],
            NoiseKind::GaussianDiagonal => self.scale.iter().map(|s| s * s).collect(),
            NoiseKind::UniformBox => self.scale.iter().map(|h| h * h / 3.0).collect(),
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let mut out = vec![0.0; self.dim()];
        self.sample_into(rng, &mut out);
        out
    }

    pub fn sample_into<R: Rng + ?Sized>(&self, rng: &mut R, out: &mut [f64]) {
        match self.kind {
            NoiseKind::Zero => out.iter_mut().for_each(|v| *v = 0.0),
            NoiseKind::GaussianDiagonal => {
                for (v, s) in out.iter_mut().zip(self.scale.iter()) {
                    let z: f64 = StandardNormal.sample(rng);
                    *v = s * z;
                }
            }
            NoiseKind::UniformBox => {
                for (v, h) in out.iter_mut().zip(self.scale.iter()) {
                    *v = if *h > 0.0 { rng.gen_range(-*h..=*h) } else { 0.0 };
                }
            }
        }
    }
}
