use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Finite candidate set for the hallucination vector `eta in [-1, 1]^d`.
///
/// The zero vector always comes first so ties resolve to the nominal model.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EtaSearch {
    /// `{-1, 0, 1}^d`.
    #[default]
    Vertices3,
    /// `{-1, 1}^d` plus the center.
    Corners,
    /// `n` evenly spaced values per coordinate, `n` odd.
    Lattice(usize),
    /// Only `eta = 0`.
    Nominal,
}

impl EtaSearch {
    pub fn points(&self, dim: usize) -> Result<Vec<Vec<f64>>> {
        let levels: Vec<f64> = match *self {
            EtaSearch::Nominal => return Ok(vec![vec![0.0; dim]]),
            EtaSearch::Vertices3 => vec![-1.0, 0.0, 1.0],
            EtaSearch::Corners => {
                let mut pts = vec![vec![0.0; dim]];
                pts.extend(product(&[-1.0, 1.0], dim));
                return Ok(pts);
            }
            EtaSearch::Lattice(n) => {
                if n < 3 || n % 2 == 0 {
                    return Err(Error::invalid("eta lattice needs an odd count >= 3"));
                }
                (0..n).map(|i| -1.0 + 2.0 * i as f64 / (n - 1) as f64).collect()
            }
        };
        if levels.len().checked_pow(dim as u32).is_none_or(|c| c > 100_000) {
            return Err(Error::invalid("eta candidate set too large"));
        }
        let mut pts: Vec<Vec<f64>> = product(&levels, dim);
        let zero = pts
            .iter()
            .position(|p| p.iter().all(|v| *v == 0.0))
            .expect("odd lattice holds 0");
        let z = pts.remove(zero);
        pts.insert(0, z);
        Ok(pts)
    }
}

fn product(levels: &[f64], dim: usize) -> Vec<Vec<f64>> {
    let mut pts = vec![Vec::with_capacity(dim)];
    for _ in 0..dim {
        pts = pts
            .into_iter()
            .flat_map(|p| {
                levels.iter().map(move |l| {
                    let mut q = p.clone();
                    q.push(*l);
                    q
                })
            })
            .collect();
    }
    pts
}
