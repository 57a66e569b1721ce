use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::backup::CemMinimaxConfig;
use crate::cert::CertOptions;
use crate::envs::{DoubleIntegratorConfig, PitchConfig};
use crate::error::{Error, Result};
use crate::filter::FilterConfig;
use crate::model::{EnsembleConfig, FitConfig};
use crate::objective::safe_threshold;
use crate::value::{AxisSpec, EtaSearch, SolverConfig};

use super::PlannerConfig;

/// One experiment, as read from a TOML file. Unknown keys are rejected and
/// every run artifact embeds the canonical form of this document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_name")]
    pub name: String,
    pub seed: u64,
    pub output_dir: PathBuf,
    pub environment: EnvironmentConfig,
    pub model: ModelConfig,
    pub objective: ObjectiveConfig,
    pub grid: GridConfig,
    pub backup: BackupConfig,
    /// Search settings only; the threshold comes from `[objective]`.
    #[serde(default, serialize_with = "filter_without_xi")]
    pub filter: FilterConfig,
    #[serde(default)]
    pub nominal: PlannerConfig,
    #[serde(default)]
    pub episodes: EpisodeConfig,
    #[serde(default)]
    pub certificate: CertificateConfig,
}

fn filter_without_xi<S: serde::Serializer>(f: &FilterConfig, s: S) -> std::result::Result<S::Ok, S::Error> {
    use serde::ser::Error as _;
    let mut t = toml::Table::try_from(f).map_err(S::Error::custom)?;
    t.remove("xi");
    t.serialize(s)
}

fn default_name() -> String {
    "experiment".to_string()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum EnvironmentConfig {
    Pitch(PitchConfig),
    DoubleIntegrator(DoubleIntegratorConfig),
}

impl EnvironmentConfig {
    pub fn state_dim(&self) -> usize {
        match self {
            EnvironmentConfig::Pitch(_) => 3,
            EnvironmentConfig::DoubleIntegrator(_) => 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ModelConfig {
    /// True dynamics plus a bounded bias, with a fixed `sigma`.
    Oracle(OracleModelConfig),
    Ensemble(EnsembleModelConfig),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OracleModelConfig {
    pub sigma: Vec<f64>,
    #[serde(default = "one")]
    pub beta: f64,
    /// Bias amplitude as a fraction of `beta * sigma`.
    #[serde(default)]
    pub bias_fraction: f64,
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnsembleModelConfig {
    pub ensemble: EnsembleConfig,
    /// Pre-training on the warm-up data.
    pub fit: FitConfig,
    /// Epochs of every per-episode refit; 0 disables refits.
    pub refit_epochs: usize,
    /// Fraction of warm-up transitions held out for fitting `beta`.
    pub holdout_fraction: f64,
    /// Coverage quantile for `beta`; `None` keeps `ensemble.beta`.
    pub beta_quantile: Option<f64>,
    pub buffer_capacity: usize,
}

impl Default for EnsembleModelConfig {
    fn default() -> Self {
        Self {
            ensemble: EnsembleConfig::default(),
            fit: FitConfig::default(),
            refit_epochs: 20,
            holdout_fraction: 0.2,
            beta_quantile: Some(0.99),
            buffer_capacity: 100_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectiveConfig {
    pub gamma: f64,
    pub cost: CostConfig,
    /// Absolute threshold; takes precedence over `xi_fraction`.
    #[serde(default)]
    pub xi: Option<f64>,
    /// Threshold as a fraction of `xi_bar`.
    #[serde(default)]
    pub xi_fraction: Option<f64>,
}

impl ObjectiveConfig {
    pub fn xi_bar(&self) -> f64 {
        safe_threshold(self.gamma, 0.0, self.cost.c_hat())
    }

    pub fn xi(&self) -> f64 {
        match (self.xi, self.xi_fraction) {
            (Some(xi), _) => xi,
            (None, Some(f)) => f * self.xi_bar(),
            (None, None) => 0.5 * self.xi_bar(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum CostConfig {
    /// 0 on the safe set, 1 off it.
    Indicator,
    /// Dead-zone ramp in the backup's Riccati metric about its
    /// equilibrium. Both lengths are fractions of the distance to the
    /// constraint boundary. Needs an `lqr` backup and a half-space
    /// constraint.
    Ellipsoidal { dead_zone: f64, width: f64 },
}

impl CostConfig {
    pub fn c_hat(&self) -> f64 {
        match *self {
            CostConfig::Indicator => 1.0,
            CostConfig::Ellipsoidal { dead_zone, width } => ((1.0 - dead_zone) / width).clamp(0.0, 1.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub axes: Vec<AxisSpec>,
    #[serde(default = "default_hermite")]
    pub hermite_nodes: usize,
    #[serde(default)]
    pub eta: EtaSearch,
    #[serde(default)]
    pub solver: SolverConfig,
}

fn default_hermite() -> usize {
    3
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum BackupConfig {
    /// Saturated LQR about the model equilibrium at `reference`, with the
    /// coordinates in `free` released when solving for it.
    Lqr {
        reference: Vec<f64>,
        #[serde(default)]
        free: Vec<usize>,
        q_diag: Vec<f64>,
        r_diag: Vec<f64>,
    },
    /// Min-max value iteration on the grid over a lattice of actions.
    RobustVi {
        #[serde(default = "default_action_points")]
        action_points: usize,
    },
    /// Alternating CEM over saturated affine policies and hallucination
    /// policies, both about `center`, from the given start states.
    CemMinimax {
        center: Vec<f64>,
        initial_states: Vec<Vec<f64>>,
        #[serde(default)]
        search: CemMinimaxConfig,
    },
}

fn default_action_points() -> usize {
    crate::backup::DEFAULT_ACTION_POINTS
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EpisodeConfig {
    /// Random-policy episodes collected before the model fit.
    pub warmup: usize,
    pub count: usize,
    pub steps: usize,
    /// `false` runs the nominal policy alone, for a baseline.
    pub filtered: bool,
    /// Write per-step diagnostics for every episode.
    pub diagnostics: bool,
}

impl Default for EpisodeConfig {
    fn default() -> Self {
        Self {
            warmup: 10,
            count: 30,
            steps: 300,
            filtered: true,
            diagnostics: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DriftScope {
    SafeSet,
    /// Nodes of the `xi_bar` sub-level set.
    XiBarLevel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CertificateConfig {
    pub horizon: usize,
    pub drift_scope: DriftScope,
    pub drift_eta: EtaSearch,
    pub options: CertOptions,
    /// Monte-Carlo cross-check roll-outs on the true system; 0 skips it.
    pub mc_rollouts: usize,
}

impl Default for CertificateConfig {
    fn default() -> Self {
        Self {
            horizon: 100,
            drift_scope: DriftScope::SafeSet,
            drift_eta: EtaSearch::default(),
            options: CertOptions::default(),
            mc_rollouts: 0,
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let raw: toml::Table = toml::from_str(text).map_err(|e| Error::Format(e.to_string()))?;
        if raw.get("filter").and_then(|f| f.get("xi")).is_some() {
            return Err(Error::invalid("set xi under [objective], not [filter]"));
        }
        let config: Self = toml::from_str(text).map_err(|e| Error::Format(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    /// Canonical TOML: every field present, fixed order.
    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Format(e.to_string()))
    }

    /// Filter settings with the objective's threshold.
    pub fn filter_config(&self) -> FilterConfig {
        FilterConfig {
            xi: self.objective.xi(),
            ..self.filter
        }
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.environment.state_dim();
        let o = &self.objective;
        if !(o.gamma > 0.0 && o.gamma < 1.0) {
            return Err(Error::invalid(format!("gamma = {} must lie in (0, 1)", o.gamma)));
        }
        if let Some(f) = o.xi_fraction {
            if !(f > 0.0 && f < 1.0) {
                return Err(Error::invalid(format!("xi_fraction = {f} must lie in (0, 1)")));
            }
        }
        if let CostConfig::Ellipsoidal { dead_zone, width } = o.cost {
            if !((0.0..1.0).contains(&dead_zone) && width > 0.0) {
                return Err(Error::invalid(
                    "ellipsoidal cost needs dead_zone in [0, 1) and a positive width",
                ));
            }
            if !matches!(self.backup, BackupConfig::Lqr { .. }) {
                return Err(Error::invalid(
                    "the ellipsoidal cost takes its metric from an lqr backup",
                ));
            }
            if !matches!(self.environment, EnvironmentConfig::Pitch(_)) {
                return Err(Error::invalid("the ellipsoidal cost needs a half-space constraint"));
            }
        }
        let (xi, xi_bar) = (o.xi(), o.xi_bar());
        if !(xi < xi_bar) {
            return Err(Error::invalid(format!(
                "xi = {xi} must be strictly below xi_bar = {xi_bar}"
            )));
        }
        if self.grid.axes.len() != d {
            return Err(Error::invalid(format!(
                "grid has {} axes for a {d}-dimensional state",
                self.grid.axes.len()
            )));
        }
        if self.grid.axes.iter().any(|a| a.points < 2 || !(a.high > a.low)) {
            return Err(Error::invalid("every grid axis needs two points and high > low"));
        }
        if self.grid.hermite_nodes == 0 {
            return Err(Error::invalid("hermite_nodes must be positive"));
        }
        match &self.model {
            ModelConfig::Oracle(m) => {
                if m.sigma.len() != d || m.sigma.iter().any(|s| !(*s >= 0.0)) {
                    return Err(Error::invalid(
                        "oracle sigma must be non-negative with one entry per state",
                    ));
                }
                if !(m.beta > 0.0) || !(0.0..=1.0).contains(&m.bias_fraction) {
                    return Err(Error::invalid(
                        "oracle beta must be positive and bias_fraction in [0, 1]",
                    ));
                }
            }
            ModelConfig::Ensemble(m) => {
                if m.ensemble.members == 0 || m.fit.epochs == 0 || m.buffer_capacity == 0 {
                    return Err(Error::invalid("ensemble needs members, epochs and buffer capacity"));
                }
                if !(m.holdout_fraction >= 0.0 && m.holdout_fraction < 1.0) {
                    return Err(Error::invalid("holdout_fraction must lie in [0, 1)"));
                }
                if let Some(q) = m.beta_quantile {
                    if !(q > 0.0 && q <= 1.0) || m.holdout_fraction == 0.0 {
                        return Err(Error::invalid(
                            "beta_quantile needs a value in (0, 1] and held-out data",
                        ));
                    }
                }
                if self.episodes.warmup == 0 {
                    return Err(Error::invalid("a learned model needs warm-up episodes"));
                }
            }
        }
        match &self.backup {
            BackupConfig::Lqr {
                reference,
                free,
                q_diag,
                r_diag,
            } => {
                if reference.len() != d || q_diag.len() != d || free.iter().any(|i| *i >= d) {
                    return Err(Error::invalid(
                        "lqr reference, q_diag and free indices must match the state",
                    ));
                }
                if q_diag.iter().any(|q| !(*q >= 0.0)) || r_diag.iter().any(|r| !(*r > 0.0)) {
                    return Err(Error::invalid("lqr weights must be non-negative (q) and positive (r)"));
                }
            }
            BackupConfig::RobustVi { action_points } => {
                if *action_points == 0 {
                    return Err(Error::invalid("action_points must be positive"));
                }
            }
            BackupConfig::CemMinimax {
                center, initial_states, ..
            } => {
                if center.len() != d || initial_states.is_empty() || initial_states.iter().any(|x| x.len() != d) {
                    return Err(Error::invalid(
                        "cem-minimax center and initial states must match the state",
                    ));
                }
            }
        }
        self.filter_config().validate(xi_bar)?;
        self.nominal.validate()?;
        if self.episodes.count == 0 || self.episodes.steps == 0 {
            return Err(Error::invalid("episode count and length must be positive"));
        }
        if self.certificate.horizon == 0 {
            return Err(Error::invalid("certificate horizon must be positive"));
        }
        Ok(())
    }
}
