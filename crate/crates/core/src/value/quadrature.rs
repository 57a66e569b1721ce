use rand::Rng;

use crate::common::{NoiseKind, NoiseModel, RandomSource};
use crate::error::{Error, Result};

pub const DEFAULT_HERMITE_NODES: usize = 5;
pub const UNIFORM_SAMPLES: usize = 64;

/// Nodes and weights `(omega_j, w_j)` approximating `E_omega[g(omega)]`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseQuadrature {
    points: Vec<Vec<f64>>,
    weights: Vec<f64>,
}

/// Probabilists' Gauss-Hermite rule: nodes and weights for `E[g(Z)]` with
/// `Z ~ N(0, 1)`.
pub fn gauss_hermite(n: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    if n == 0 || n > 64 {
        return Err(Error::invalid("Gauss-Hermite order must be between 1 and 64"));
    }
    let pim4 = std::f64::consts::PI.powf(-0.25);
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    let nf = n as f64;
    let mut z = 0.0f64;
    for i in 0..n.div_ceil(2) {
        z = match i {
            0 => (2.0 * nf + 1.0).sqrt() - 1.85575 * (2.0 * nf + 1.0).powf(-1.0 / 6.0),
            1 => z - 1.14 * nf.powf(0.426) / z,
            2 => 1.86 * z - 0.86 * x[0],
            3 => 1.91 * z - 0.91 * x[1],
            _ => 2.0 * z - x[i - 2],
        };
        let mut pp = 0.0;
        for _ in 0..100 {
            let mut p1 = pim4;
            let mut p2 = 0.0;
            for j in 0..n {
                let p3 = p2;
                p2 = p1;
                let jf = j as f64;
                p1 = z * (2.0 / (jf + 1.0)).sqrt() * p2 - (jf / (jf + 1.0)).sqrt() * p3;
            }
            pp = (2.0 * nf).sqrt() * p2;
            let z1 = z;
            z = z1 - p1 / pp;
            if (z - z1).abs() <= 1e-15 * z.abs().max(1.0) {
                break;
            }
        }
        x[i] = z;
        x[n - 1 - i] = -z;
        w[i] = 2.0 / (pp * pp);
        w[n - 1 - i] = w[i];
    }
    if n % 2 == 1 {
        x[n / 2] = 0.0;
    }
    let sqrt_pi = std::f64::consts::PI.sqrt();
    let nodes = x.iter().rev().map(|v| v * std::f64::consts::SQRT_2).collect();
    let weights = w.iter().rev().map(|v| v / sqrt_pi).collect();
    Ok((nodes, weights))
}

impl NoiseQuadrature {
    pub fn new(noise: &NoiseModel, hermite_nodes: usize) -> Result<Self> {
        let d = noise.dim();
        match noise.kind {
            _ if noise.is_zero() => Ok(Self::point(d)),
            NoiseKind::Zero => Ok(Self::point(d)),
            NoiseKind::GaussianDiagonal => {
                let (z, wz) = gauss_hermite(hermite_nodes)?;
                let mut points = vec![Vec::with_capacity(d)];
                let mut weights = vec![1.0];
                for (i, s) in noise.scale.iter().enumerate() {
                    if *s == 0.0 {
                        for p in &mut points {
                            p.push(0.0);
                        }
                        continue;
                    }
                    let mut np = Vec::with_capacity(points.len() * z.len());
                    let mut nw = Vec::with_capacity(points.len() * z.len());
                    for (p, w) in points.iter().zip(&weights) {
                        for (zk, wk) in z.iter().zip(&wz) {
                            let mut q = p.clone();
                            q.push(s * zk);
                            np.push(q);
                            nw.push(w * wk);
                        }
                    }
                    points = np;
                    weights = nw;
                    debug_assert_eq!(points[0].len(), i + 1);
                }
                Ok(Self { points, weights })
            }
            NoiseKind::UniformBox => Ok(Self::uniform(noise)),
        }
    }

    /// Arbitrary rule; weights must be non-negative and sum to one.
    pub fn from_points(points: Vec<Vec<f64>>, weights: Vec<f64>) -> Result<Self> {
        if points.is_empty() || points.len() != weights.len() {
            return Err(Error::invalid(
                "quadrature needs matching, non-empty points and weights",
            ));
        }
        let d = points[0].len();
        if d == 0 || points.iter().any(|p| p.len() != d || p.iter().any(|v| !v.is_finite())) {
            return Err(Error::invalid(
                "quadrature points must share a positive dimension and be finite",
            ));
        }
        if weights.iter().any(|w| !(*w >= 0.0)) || (weights.iter().sum::<f64>() - 1.0).abs() > 1e-12 {
            return Err(Error::invalid("quadrature weights must be non-negative and sum to one"));
        }
        Ok(Self { points, weights })
    }

    pub fn point(dim: usize) -> Self {
        Self {
            points: vec![vec![0.0; dim]],
            weights: vec![1.0],
        }
    }

    /// Fixed antithetic sample, rescaled per dimension to the exact variance.
    fn uniform(noise: &NoiseModel) -> Self {
        let d = noise.dim();
        let mut rng = RandomSource::new(0x5ee_d0f0_015e, 0);
        let half = UNIFORM_SAMPLES / 2;
        let mut points = Vec::with_capacity(UNIFORM_SAMPLES);
        for _ in 0..half {
            let p: Vec<f64> = noise.scale.iter().map(|h| h * rng.gen_range(-1.0..=1.0)).collect();
            points.push(p.iter().map(|v| -v).collect::<Vec<f64>>());
            points.push(p);
        }
        let target = noise.variance();
        for i in 0..d {
            let var = points.iter().map(|p| p[i] * p[i]).sum::<f64>() / points.len() as f64;
            if var > 0.0 {
                let f = (target[i] / var).sqrt();
                for p in &mut points {
                    p[i] *= f;
                }
            }
        }
        Self {
            weights: vec![1.0 / UNIFORM_SAMPLES as f64; UNIFORM_SAMPLES],
            points,
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.points[0].len()
    }

    pub fn points(&self) -> &[Vec<f64>] {
        &self.points
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn expect(&self, g: impl Fn(&[f64]) -> f64) -> f64 {
        self.points.iter().zip(&self.weights).map(|(p, w)| w * g(p)).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hermite_rule_integrates_gaussian_moments() {
        for n in 1..=12 {
            let (x, w) = gauss_hermite(n).unwrap();
            // E[Z^k] = (k-1)!! for even k
            let mut dfact = 1.0;
            for k in 0..2 * n {
                let m: f64 = x.iter().zip(&w).map(|(xi, wi)| wi * xi.powi(k as i32)).sum();
                let exact = if k % 2 == 1 {
                    0.0
                } else {
                    if k >= 2 {
                        dfact *= (k - 1) as f64;
                    }
                    dfact
                };
                let scale: f64 = x.iter().zip(&w).map(|(xi, wi)| (wi * xi.powi(k as i32)).abs()).sum();
                assert!(
                    (m - exact).abs() < 1e-12 * scale.max(1.0),
                    "n={n} k={k}: {m} vs {exact}"
                );
            }
        }
        let (x, _) = gauss_hermite(3).unwrap();
        assert!((x[2] - 3f64.sqrt()).abs() < 1e-14);
    }

    #[test]
    fn tensor_rule_matches_model_variance() {
        let noise = NoiseModel::gaussian(vec![0.1, 0.0, 0.3]).unwrap();
        let q = NoiseQuadrature::new(&noise, 5).unwrap();
        assert_eq!(q.len(), 25);
        assert!((q.weights().iter().sum::<f64>() - 1.0).abs() < 1e-14);
        for (i, v) in noise.variance().iter().enumerate() {
            assert!(q.expect(|p| p[i]).abs() < 1e-15);
            assert!((q.expect(|p| p[i] * p[i]) - v).abs() < 1e-15);
        }
    }

    #[test]
    fn uniform_rule_is_centered_with_exact_variance() {
        let noise = NoiseModel::uniform(vec![0.5, 2.0]).unwrap();
        let q = NoiseQuadrature::new(&noise, 5).unwrap();
        assert_eq!(q.len(), 64);
        for (i, v) in noise.variance().iter().enumerate() {
            assert!(q.expect(|p| p[i]).abs() < 1e-15);
            assert!((q.expect(|p| p[i] * p[i]) - v).abs() < 1e-12);
        }
        assert_eq!(q, NoiseQuadrature::new(&noise, 5).unwrap());
    }

    #[test]
    fn zero_noise_is_a_single_point() {
        let q = NoiseQuadrature::new(&NoiseModel::zero(2), 5).unwrap();
        assert_eq!(q.points(), &[vec![0.0, 0.0]]);
    }
}
