use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::backup::{
    action_grid, cem_minimax_policy, lqr_about_equilibrium, robust_value_iteration, BackupPolicy, FeatureMap,
    ParametricPolicy,
};
use crate::cert::{certify, mc_delta_estimate, CertificateReport, McCrossCheck};
use crate::checkpoint::Checkpoint;
use crate::common::linalg::{self, Matrix};
use crate::common::{Bounds, Policy, RandomSource};
use crate::envs::{DoubleIntegratorEnv, Environment, PitchControlEnv};
use crate::error::{Error, Result};
use crate::model::{fit_beta, CalibratedModel, EnsembleModel, OraclePerturbedModel, ReplayBuffer, TrainingReport};
use crate::objective::{ellipsoidal_cost, indicator_cost, ImmediateCost, SafetyObjective};
use crate::value::{
    certify_policy, check_drift, pessimistic_value_grid, CertInput, DriftOptions, DriftRegion, DriftReport, GridSpec,
    GridValueFunction, NoiseQuadrature, ValueSolution,
};

use super::config::{BackupConfig, CostConfig, DriftScope, EnvironmentConfig, ExperimentConfig, ModelConfig};
use super::UniformPolicy;

/// Fixed sub-streams of the experiment seed, one per stage.
pub mod streams {
    pub const WARMUP: u64 = 1;
    pub const MODEL: u64 = 2;
    pub const BACKUP: u64 = 3;
    pub const CERTIFICATE: u64 = 4;
    pub const EPISODES: u64 = 5;
    pub const REFIT: u64 = 6;
}

pub fn build_environment(config: &EnvironmentConfig) -> Result<Arc<dyn Environment>> {
    Ok(match config {
        EnvironmentConfig::Pitch(c) => Arc::new(PitchControlEnv::new(c.clone())?),
        EnvironmentConfig::DoubleIntegrator(c) => Arc::new(DoubleIntegratorEnv::new(c.clone())?),
    })
}

/// Safe half-space `a . x <= b`, where the constraint has that form.
pub fn half_space(config: &EnvironmentConfig) -> Option<(Vec<f64>, f64)> {
    match config {
        EnvironmentConfig::Pitch(_) => Some((vec![0.0, 0.0, 1.0], 0.0)),
        EnvironmentConfig::DoubleIntegrator(_) => None,
    }
}

/// Episodes of uniformly random actions on the true system.
pub fn collect_warmup(
    env: &dyn Environment,
    episodes: usize,
    steps: usize,
    capacity: usize,
    rng: &RandomSource,
) -> Result<ReplayBuffer> {
    let mut buffer = ReplayBuffer::new(env.state_dim(), env.action_dim(), capacity)?;
    let policy = UniformPolicy(env.action_bounds().clone());
    for ep in 0..episodes {
        let mut r = rng.fork(ep as u64);
        let mut x = env.initial_state(&mut r).into_inner();
        for _ in 0..steps {
            let u = policy.act(&x, &mut r);
            let next = env.step(&x, &u, &mut r)?;
            buffer.push(&x, &u, &next)?;
            x = next;
        }
    }
    Ok(buffer)
}

pub enum LearnedModel {
    Oracle(Arc<OraclePerturbedModel>),
    Ensemble(Arc<EnsembleModel>),
}

impl LearnedModel {
    pub fn shared(&self) -> Arc<dyn CalibratedModel> {
        match self {
            LearnedModel::Oracle(m) => m.clone(),
            LearnedModel::Ensemble(m) => m.clone(),
        }
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        match self {
            LearnedModel::Oracle(m) => Checkpoint::new(
                "oracle-model",
                serde_json::json!({
                    "sigma": m.sigma(),
                    "beta": m.beta(),
                    "bias_fraction": m.bias_fraction(),
                }),
            ),
            LearnedModel::Ensemble(m) => m.to_checkpoint(),
        }
    }

    pub fn from_checkpoint(c: &Checkpoint, env: Arc<dyn Environment>) -> Result<Self> {
        if c.kind == "oracle-model" {
            c.expect_kind("oracle-model")?;
            let field = |k: &str| {
                c.metadata
                    .get(k)
                    .cloned()
                    .ok_or_else(|| Error::Format(format!("oracle metadata lacks `{k}`")))
            };
            let sigma: Vec<f64> = serde_json::from_value(field("sigma")?)?;
            let beta: f64 = serde_json::from_value(field("beta")?)?;
            let bias: f64 = serde_json::from_value(field("bias_fraction")?)?;
            return Ok(LearnedModel::Oracle(Arc::new(OraclePerturbedModel::new(
                env, sigma, beta, bias,
            )?)));
        }
        Ok(LearnedModel::Ensemble(Arc::new(EnsembleModel::from_checkpoint(c)?)))
    }

    /// Further training on the whole buffer; a no-op for the oracle.
    pub fn refit(
        &mut self,
        buffer: &ReplayBuffer,
        epochs: usize,
        config: &ExperimentConfig,
        rng: &mut RandomSource,
    ) -> Result<()> {
        let (LearnedModel::Ensemble(m), ModelConfig::Ensemble(c)) = (self, &config.model) else {
            return Ok(());
        };
        if epochs == 0 {
            return Ok(());
        }
        let fit = crate::model::FitConfig {
            epochs,
            ..c.fit.clone()
        };
        Arc::make_mut(m).fit(buffer, &fit, rng)?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelReport {
    pub kind: String,
    pub train_transitions: usize,
    pub holdout_transitions: usize,
    pub beta: f64,
    /// Held-out root-mean-square one-step error of the mean.
    pub holdout_rmse: Option<f64>,
    pub final_losses: Vec<f64>,
}

/// Builds or trains the calibrated model. For an ensemble the trailing
/// `holdout_fraction` of the warm-up data fits `beta` against the true mean
/// dynamics and is left out of training.
pub fn fit_model(
    config: &ExperimentConfig,
    env: Arc<dyn Environment>,
    warmup: &ReplayBuffer,
    rng: &RandomSource,
) -> Result<(LearnedModel, ModelReport)> {
    match &config.model {
        ModelConfig::Oracle(m) => {
            let model = OraclePerturbedModel::new(env, m.sigma.clone(), m.beta, m.bias_fraction)?;
            let report = ModelReport {
                kind: "oracle".into(),
                train_transitions: 0,
                holdout_transitions: 0,
                beta: m.beta,
                holdout_rmse: None,
                final_losses: Vec::new(),
            };
            Ok((LearnedModel::Oracle(Arc::new(model)), report))
        }
        ModelConfig::Ensemble(m) => {
            let n = warmup.len();
            let held = ((n as f64) * m.holdout_fraction).round() as usize;
            let mut train = ReplayBuffer::new(warmup.state_dim(), warmup.action_dim(), m.buffer_capacity)?;
            for t in warmup.iter().take(n - held) {
                train.push(&t.x, &t.u, &t.next)?;
            }
            let mut r = rng.fork(0);
            let mut model = EnsembleModel::new(env.state_dim(), env.action_dim(), m.ensemble.clone(), &mut r)?;
            let training: TrainingReport = model.fit(&train, &m.fit, &mut rng.fork(1))?;
            let holdout: Vec<_> = warmup.iter().skip(n - held).collect();
            let pairs: Vec<(Vec<f64>, Vec<f64>)> = holdout.iter().map(|t| (t.x.clone(), t.u.clone())).collect();
            if let Some(q) = m.beta_quantile {
                let beta = fit_beta(&model, |x, u| env.mean_step(x, u), &pairs, q)?;
                model.set_beta(beta.max(crate::model::SIGMA_FLOOR));
            }
            let rmse = if holdout.is_empty() {
                None
            } else {
                let sq: f64 = holdout
                    .iter()
                    .map(|t| {
                        let p = model.predict(&t.x, &t.u);
                        p.mean.iter().zip(&t.next).map(|(a, b)| (a - b).powi(2)).sum::<f64>()
                    })
                    .sum();
                Some((sq / (holdout.len() * env.state_dim()) as f64).sqrt())
            };
            let report = ModelReport {
                kind: "ensemble".into(),
                train_transitions: train.len(),
                holdout_transitions: holdout.len(),
                beta: model.beta(),
                holdout_rmse: rmse,
                final_losses: training.final_losses(),
            };
            Ok((LearnedModel::Ensemble(Arc::new(model)), report))
        }
    }
}

/// Serializable description of the immediate cost, so later stages can
/// rebuild it without redoing the backup design.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum CostSpec {
    Indicator,
    Ellipsoidal {
        center: Vec<f64>,
        shape: Matrix,
        r0: f64,
        width: f64,
        normal: Vec<f64>,
        offset: f64,
    },
}

impl CostSpec {
    pub fn build(&self, env: Arc<dyn Environment>) -> Result<ImmediateCost> {
        match self {
            CostSpec::Indicator => Ok(indicator_cost(Arc::new(move |x: &[f64]| env.is_safe(x)))),
            CostSpec::Ellipsoidal {
                center,
                shape,
                r0,
                width,
                normal,
                offset,
            } => ellipsoidal_cost(center.clone(), shape.clone(), *r0, *width, normal.clone(), *offset),
        }
    }
}

pub struct BackupStage {
    pub policy: BackupPolicy,
    pub cost: CostSpec,
    /// Cost of the returned policy as seen by the learner, where it
    /// reports one.
    pub learner_value: Option<f64>,
}

pub fn grid_of(config: &ExperimentConfig) -> Result<GridSpec> {
    GridSpec::new(config.grid.axes.clone())
}

pub fn quadrature_of(config: &ExperimentConfig, env: &dyn Environment) -> Result<NoiseQuadrature> {
    NoiseQuadrature::new(env.noise(), config.grid.hermite_nodes)
}

fn ellipsoid_spec(config: &ExperimentConfig, center: &[f64], p: &Matrix) -> Result<CostSpec> {
    let CostConfig::Ellipsoidal { dead_zone, width } = config.objective.cost else {
        return Ok(CostSpec::Indicator);
    };
    let (normal, offset) = half_space(&config.environment)
        .ok_or_else(|| Error::invalid("ellipsoidal cost needs a half-space constraint"))?;
    let inv = linalg::invert(p).ok_or_else(|| Error::invalid("Riccati matrix is singular"))?;
    let scale = linalg::dot(&normal, &linalg::mat_vec(&inv, &normal)).sqrt();
    let near = (offset - linalg::dot(&normal, center)) / scale;
    if !(near > 0.0) {
        return Err(Error::invalid("backup equilibrium lies outside the safe half-space"));
    }
    Ok(CostSpec::Ellipsoidal {
        center: center.to_vec(),
        shape: p.clone(),
        r0: dead_zone * near,
        width: width * near,
        normal,
        offset,
    })
}

pub fn learn_backup(
    config: &ExperimentConfig,
    env: Arc<dyn Environment>,
    model: &dyn CalibratedModel,
    rng: &RandomSource,
) -> Result<BackupStage> {
    let bounds = env.action_bounds().clone();
    match &config.backup {
        BackupConfig::Lqr {
            reference,
            free,
            q_diag,
            r_diag,
        } => {
            let d = lqr_about_equilibrium(model, reference, free, q_diag, r_diag, &bounds)?;
            let cost = ellipsoid_spec(config, &d.center, &d.p)?;
            Ok(BackupStage {
                policy: BackupPolicy::Parametric(d.policy),
                cost,
                learner_value: None,
            })
        }
        BackupConfig::RobustVi { action_points } => {
            let cost = CostSpec::Indicator;
            let c = cost.build(env.clone())?;
            let grid = grid_of(config)?;
            let quad = quadrature_of(config, env.as_ref())?;
            let sol = robust_value_iteration(
                model,
                &c,
                config.objective.gamma,
                &grid,
                &action_grid(&bounds, *action_points)?,
                &bounds,
                config.grid.eta,
                &quad,
                &config.grid.solver,
            )?;
            Ok(BackupStage {
                policy: BackupPolicy::Tabular(sol.policy),
                cost,
                learner_value: None,
            })
        }
        BackupConfig::CemMinimax {
            center,
            initial_states,
            search,
        } => {
            let cost = CostSpec::Indicator;
            let c = cost.build(env.clone())?;
            let start = ParametricPolicy::zeros(FeatureMap::Affine { center: center.clone() }, bounds)?;
            let eta = ParametricPolicy::zeros(
                FeatureMap::Affine { center: center.clone() },
                Bounds::unit(env.state_dim()),
            )?;
            let r = cem_minimax_policy(
                model,
                env.noise(),
                &c,
                config.objective.gamma,
                initial_states,
                &start,
                &eta,
                search,
                &mut rng.fork(0),
            )?;
            Ok(BackupStage {
                policy: BackupPolicy::Parametric(r.policy),
                cost,
                learner_value: Some(r.value),
            })
        }
    }
}

pub fn objective_of(config: &ExperimentConfig, cost: ImmediateCost) -> Result<SafetyObjective> {
    SafetyObjective::new(cost, config.objective.gamma, Some(config.objective.xi()))
}

pub fn solve_value(
    config: &ExperimentConfig,
    env: &dyn Environment,
    model: &dyn CalibratedModel,
    policy: &dyn Policy,
    cost: &ImmediateCost,
) -> Result<ValueSolution> {
    pessimistic_value_grid(
        model,
        policy,
        cost,
        config.objective.gamma,
        &grid_of(config)?,
        &quadrature_of(config, env)?,
        config.grid.eta,
        &config.grid.solver,
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CertificateArtifact {
    pub certified: bool,
    /// Why no certificate was issued.
    pub reason: Option<String>,
    pub xi: f64,
    pub xi_bar: f64,
    pub value_at_initial_states: Vec<f64>,
    /// `None` when the drift region holds no grid node.
    pub drift: Option<DriftReport>,
    pub input: Option<CertInput>,
    pub report: Option<CertificateReport>,
    pub mc_crosscheck: Option<McCrossCheck>,
}

/// Initial states drawn from the environment's distribution.
pub fn initial_states(env: &dyn Environment, n: usize, rng: &RandomSource) -> Vec<Vec<f64>> {
    (0..n)
        .map(|i| env.initial_state(&mut rng.fork(i as u64)).into_inner())
        .collect()
}

/// Drift check and, where it holds, the escape bound. A failed drift check
/// is a result, not an error.
pub fn certify_stage(
    config: &ExperimentConfig,
    env: Arc<dyn Environment>,
    model: &dyn CalibratedModel,
    policy: &dyn Policy,
    vp: &GridValueFunction,
    objective: &SafetyObjective,
    rng: &RandomSource,
) -> Result<CertificateArtifact> {
    let c = &config.certificate;
    let region = match c.drift_scope {
        DriftScope::SafeSet => DriftRegion::SafeSet,
        DriftScope::XiBarLevel => DriftRegion::SubLevel(objective.xi_bar()),
    };
    let quad = quadrature_of(config, env.as_ref())?;
    let opts = DriftOptions {
        region,
        eta: c.drift_eta,
        floor: objective.xi(),
        ..DriftOptions::default()
    };
    let safe = {
        let env = env.clone();
        move |x: &[f64]| env.is_safe(x)
    };
    let x0 = initial_states(env.as_ref(), 16, &rng.fork(0));
    let value_at_initial_states = x0.iter().map(|x| vp.eval(x)).collect();
    let mut out = CertificateArtifact {
        certified: false,
        reason: None,
        xi: objective.xi(),
        xi_bar: objective.xi_bar(),
        value_at_initial_states,
        drift: None,
        input: None,
        report: None,
        mc_crosscheck: None,
    };
    let grid = vp.grid();
    let occupied = (0..grid.len()).any(|n| {
        safe(&grid.node(n))
            && match region {
                DriftRegion::SafeSet => true,
                DriftRegion::SubLevel(l) => vp.values()[n] < l,
            }
    });
    if !occupied {
        out.reason = Some("no safe grid node lies in the drift region".into());
        return Ok(out);
    }
    let drift = check_drift(vp, model, policy, &safe, objective.c_min_bound(), &quad, &opts)?;
    let input = match certify_policy(vp, objective, &drift) {
        Ok(i) => i,
        Err(e) => {
            out.reason = Some(e.to_string());
            out.drift = Some(drift);
            return Ok(out);
        }
    };
    out.drift = Some(drift);
    let mut report = match certify(&input, c.horizon, &c.options) {
        Ok(r) => r,
        Err(e) => {
            out.input = Some(input);
            out.reason = Some(e.to_string());
            return Ok(out);
        }
    };
    if c.mc_rollouts > 0 {
        let step_env = env.clone();
        let mc = mc_delta_estimate(
            move |x: &[f64], u: &[f64], r: &mut RandomSource| step_env.step(x, u, r),
            policy,
            vp,
            objective.xi_bar(),
            &x0,
            c.horizon,
            c.mc_rollouts,
            &rng.fork(1),
        )?;
        report.mc_crosscheck = Some(mc.clone());
        out.mc_crosscheck = Some(mc);
    }
    out.certified = true;
    out.input = Some(input);
    out.report = Some(report);
    Ok(out)
}
