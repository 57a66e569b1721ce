use std::ops::{Deref, Index};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A fixed-dimension vector whose entries are all finite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct RealVector(Vec<f64>);

impl RealVector {
    pub fn new(entries: Vec<f64>) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::invalid("vector dimension must be positive"));
        }
        if let Some(i) = entries.iter().position(|v| !v.is_finite()) {
            return Err(Error::invalid(format!("entry {i} is not finite ({})", entries[i])));
        }
        Ok(Self(entries))
    }

    pub fn zeros(dim: usize) -> Self {
        assert!(dim > 0, "vector dimension must be positive");
        Self(vec![0.0; dim])
    }

    pub fn filled(dim: usize, value: f64) -> Self {
        assert!(dim > 0 && value.is_finite());
        Self(vec![value; dim])
    }

    /// Wraps entries already known to be finite; checked in debug builds.
    pub(crate) fn from_trusted(entries: Vec<f64>) -> Self {
        debug_assert!(!entries.is_empty() && entries.iter().all(|v| v.is_finite()));
        Self(entries)
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn norm(&self) -> f64 {
        norm(&self.0)
    }

    pub fn distance(&self, other: &RealVector) -> f64 {
        distance(&self.0, &other.0)
    }
}

impl Deref for RealVector {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl Index<usize> for RealVector {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

impl TryFrom<Vec<f64>> for RealVector {
    type Error = Error;
    fn try_from(v: Vec<f64>) -> Result<Self> {
        RealVector::new(v)
    }
}

impl From<RealVector> for Vec<f64> {
    fn from(v: RealVector) -> Vec<f64> {
        v.0
    }
}

pub fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Axis-aligned box `lower <= x <= upper`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bounds {
    lower: RealVector,
    upper: RealVector,
}

impl Bounds {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        let lower = RealVector::new(lower)?;
        let upper = RealVector::new(upper)?;
        if lower.dim() != upper.dim() {
            return Err(Error::invalid("box bounds differ in dimension"));
        }
        if lower.iter().zip(upper.iter()).any(|(l, u)| l > u) {
            return Err(Error::invalid("box lower bound exceeds upper bound"));
        }
        Ok(Self { lower, upper })
    }

    pub fn symmetric(half_width: &[f64]) -> Result<Self> {
        Self::new(half_width.iter().map(|h| -h).collect(), half_width.to_vec())
    }

    /// The hallucination hypercube `[-1, 1]^dim`.
    pub fn unit(dim: usize) -> Self {
        Self {
            lower: RealVector::filled(dim, -1.0),
            upper: RealVector::filled(dim, 1.0),
        }
    }

    pub fn dim(&self) -> usize {
        self.lower.dim()
    }

    pub fn lower(&self) -> &[f64] {
        &self.lower
    }

    pub fn upper(&self) -> &[f64] {
        &self.upper
    }

    pub fn width(&self, i: usize) -> f64 {
        self.upper[i] - self.lower[i]
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.len() == self.dim()
            && x.iter()
                .zip(self.lower.iter().zip(self.upper.iter()))
                .all(|(v, (l, u))| *v >= *l && *v <= *u)
    }

    /// Clamps in place; returns true when any coordinate moved.
    pub fn clamp_in_place(&self, x: &mut [f64]) -> bool {
        let mut moved = false;
        for (v, (l, u)) in x.iter_mut().zip(self.lower.iter().zip(self.upper.iter())) {
            let c = v.clamp(*l, *u);
            if c != *v {
                moved = true;
                *v = c;
            }
        }
        moved
    }

    pub fn clamp(&self, x: &[f64]) -> Vec<f64> {
        let mut out = x.to_vec();
        self.clamp_in_place(&mut out);
        out
    }

    pub fn center(&self) -> Vec<f64> {
        self.lower
            .iter()
            .zip(self.upper.iter())
            .map(|(l, u)| 0.5 * (l + u))
            .collect()
    }
}
