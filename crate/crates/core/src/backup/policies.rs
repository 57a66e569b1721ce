use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::common::{Bounds, Policy, RandomSource};
use crate::error::{Error, Result};
use crate::value::GridSpec;

/// One action per grid node, looked up at the nearest node.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularPolicy {
    grid: GridSpec,
    actions: Vec<Vec<f64>>,
    bounds: Bounds,
}

impl TabularPolicy {
    pub fn new(grid: GridSpec, actions: Vec<Vec<f64>>, bounds: Bounds) -> Result<Self> {
        if actions.len() != grid.len() {
            return Err(Error::invalid(format!(
                "tabular policy has {} actions for {} nodes",
                actions.len(),
                grid.len()
            )));
        }
        if let Some(n) = actions.iter().position(|u| !bounds.contains(u)) {
            return Err(Error::invalid(format!(
                "tabular action at node {n} lies outside the action box"
            )));
        }
        Ok(Self { grid, actions, bounds })
    }

    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    pub fn actions(&self) -> &[Vec<f64>] {
        &self.actions
    }

    pub fn bounds(&self) -> &Bounds {
        &self.bounds
    }

    pub fn action_at(&self, node: usize) -> &[f64] {
        &self.actions[node]
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut c = Checkpoint::new(
            "tabular-policy",
            serde_json::json!({ "grid": self.grid, "bounds": self.bounds }),
        );
        let du = self.bounds.dim();
        let flat: Vec<f64> = self.actions.iter().flatten().copied().collect();
        c.put("actions", vec![self.actions.len(), du], &flat);
        c
    }

    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self> {
        c.expect_kind("tabular-policy")?;
        let grid: GridSpec = meta(c, "grid")?;
        let bounds: Bounds = meta(c, "bounds")?;
        let (shape, flat) = c.get("actions")?;
        if shape.len() != 2 || shape[1] != bounds.dim() {
            return Err(Error::Format("tabular actions have the wrong shape".into()));
        }
        let actions = flat.chunks(shape[1].max(1)).map(|r| r.to_vec()).collect();
        Self::new(grid, actions, bounds)
    }
}

impl Policy for TabularPolicy {
    fn act(&self, x: &[f64], _rng: &mut RandomSource) -> Vec<f64> {
        self.actions[self.grid.nearest(x)].clone()
    }
}

pub(crate) fn meta<T: serde::de::DeserializeOwned>(c: &Checkpoint, key: &str) -> Result<T> {
    let v = c
        .metadata
        .get(key)
        .cloned()
        .ok_or_else(|| Error::Format(format!("{} checkpoint lacks `{key}`", c.kind)))?;
    Ok(serde_json::from_value(v)?)
}

/// Features of a parametric policy. The affine part `x - center` is always
/// present; radial bases are appended after it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind", deny_unknown_fields)]
pub enum FeatureMap {
    Affine {
        center: Vec<f64>,
    },
    Rbf {
        center: Vec<f64>,
        centers: Vec<Vec<f64>>,
        width: Vec<f64>,
    },
}

impl FeatureMap {
    pub fn state_dim(&self) -> usize {
        match self {
            FeatureMap::Affine { center } | FeatureMap::Rbf { center, .. } => center.len(),
        }
    }

    pub fn len(&self) -> usize {
        match self {
            FeatureMap::Affine { center } => center.len(),
            FeatureMap::Rbf { center, centers, .. } => center.len() + centers.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn validate(&self) -> Result<()> {
        if let FeatureMap::Rbf { center, centers, width } = self {
            if width.len() != center.len() || width.iter().any(|w| !(*w > 0.0)) {
                return Err(Error::invalid("radial basis widths must be positive, one per state"));
            }
            if centers.iter().any(|c| c.len() != center.len()) {
                return Err(Error::invalid("radial basis centers have the wrong dimension"));
            }
        }
        Ok(())
    }

    pub fn eval_into(&self, x: &[f64], out: &mut Vec<f64>) {
        out.clear();
        match self {
            FeatureMap::Affine { center } => out.extend(x.iter().zip(center).map(|(a, c)| a - c)),
            FeatureMap::Rbf { center, centers, width } => {
                out.extend(x.iter().zip(center).map(|(a, c)| a - c));
                for c in centers {
                    let r2: f64 = x
                        .iter()
                        .zip(c)
                        .zip(width)
                        .map(|((a, m), w)| ((a - m) / w).powi(2))
                        .sum();
                    out.push((-0.5 * r2).exp());
                }
            }
        }
    }
}

/// `u = mid + half * tanh((W phi(x) + b) / half)` on the action box, so
/// small outputs pass through unchanged and every action lies in the box.
#[derive(Debug, Clone, PartialEq)]
pub struct ParametricPolicy {
    features: FeatureMap,
    bounds: Bounds,
    params: Vec<f64>,
}

impl ParametricPolicy {
    pub fn new(features: FeatureMap, bounds: Bounds, params: Vec<f64>) -> Result<Self> {
        features.validate()?;
        let n = bounds.dim() * (features.len() + 1);
        if params.len() != n {
            return Err(Error::invalid(format!(
                "policy expects {n} parameters, got {}",
                params.len()
            )));
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::invalid("policy parameters must be finite"));
        }
        Ok(Self {
            features,
            bounds,
            params,
        })
    }

    pub fn zeros(features: FeatureMap, bounds: Bounds) -> Result<Self> {
        let n = bounds.dim() * (features.len() + 1);
        Self::new(features, bounds, vec![0.0; n])
    }

    /// Saturated linear feedback `u = -K (x - center)`.
    pub fn linear(center: Vec<f64>, gain: &[Vec<f64>], bounds: Bounds) -> Result<Self> {
        let dx = center.len();
        if gain.len() != bounds.dim() || gain.iter().any(|r| r.len() != dx) {
            return Err(Error::invalid("gain must be action_dim x state_dim"));
        }
        let mut params = Vec::with_capacity(bounds.dim() * (dx + 1));
        for row in gain {
            params.extend(row.iter().map(|k| -k));
            params.push(0.0);
        }
        Self::new(FeatureMap::Affine { center }, bounds, params)
    }

    pub fn features(&self) -> &FeatureMap {
        &self.features
    }

    pub fn bounds(&self) -> &Bounds {
        &self.bounds
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    pub fn with_params(&self, params: Vec<f64>) -> Result<Self> {
        Self::new(self.features.clone(), self.bounds.clone(), params)
    }

    pub fn eval_with(&self, x: &[f64], phi: &mut Vec<f64>) -> Vec<f64> {
        self.features.eval_into(x, phi);
        let nf = phi.len() + 1;
        let lower = self.bounds.lower();
        let upper = self.bounds.upper();
        (0..self.bounds.dim())
            .map(|i| {
                let w = &self.params[i * nf..(i + 1) * nf];
                let z: f64 = w[..nf - 1].iter().zip(phi.iter()).map(|(a, b)| a * b).sum::<f64>() + w[nf - 1];
                let mid = 0.5 * (lower[i] + upper[i]);
                let half = 0.5 * (upper[i] - lower[i]);
                if half > 0.0 {
                    (mid + half * (z / half).tanh()).clamp(lower[i], upper[i])
                } else {
                    mid
                }
            })
            .collect()
    }

    pub fn eval(&self, x: &[f64]) -> Vec<f64> {
        let mut phi = Vec::with_capacity(self.features.len());
        self.eval_with(x, &mut phi)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut c = Checkpoint::new(
            "parametric-policy",
            serde_json::json!({ "features": self.features, "bounds": self.bounds }),
        );
        c.put("params", vec![self.params.len()], &self.params);
        c
    }

    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self> {
        c.expect_kind("parametric-policy")?;
        Self::new(meta(c, "features")?, meta(c, "bounds")?, c.get("params")?.1)
    }
}

impl Policy for ParametricPolicy {
    fn act(&self, x: &[f64], _rng: &mut RandomSource) -> Vec<f64> {
        self.eval(x)
    }
}

/// A backup policy of either kind, as stored on disk.
#[derive(Debug, Clone, PartialEq)]
pub enum BackupPolicy {
    Tabular(TabularPolicy),
    Parametric(ParametricPolicy),
}

impl BackupPolicy {
    pub fn to_checkpoint(&self) -> Checkpoint {
        match self {
            BackupPolicy::Tabular(p) => p.to_checkpoint(),
            BackupPolicy::Parametric(p) => p.to_checkpoint(),
        }
    }

    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self> {
        match c.kind.as_str() {
            "tabular-policy" => Ok(BackupPolicy::Tabular(TabularPolicy::from_checkpoint(c)?)),
            "parametric-policy" => Ok(BackupPolicy::Parametric(ParametricPolicy::from_checkpoint(c)?)),
            other => Err(Error::Format(format!("`{other}` is not a policy checkpoint"))),
        }
    }
}

impl Policy for BackupPolicy {
    fn act(&self, x: &[f64], rng: &mut RandomSource) -> Vec<f64> {
        match self {
            BackupPolicy::Tabular(p) => p.act(x, rng),
            BackupPolicy::Parametric(p) => p.act(x, rng),
        }
    }
}
