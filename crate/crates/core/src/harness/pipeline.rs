use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::common::{Policy, RandomSource};
use crate::envs::Environment;
use crate::error::{Error, Result};
use crate::filter::{rollout_filtered, write_diagnostics_csv, SafetyFilter, StepDiagnostics};
use crate::model::ReplayBuffer;
use crate::objective::ImmediateCost;
use crate::value::GridValueFunction;

use super::config::{ExperimentConfig, ModelConfig};
use super::stages::{self, streams, CertificateArtifact, LearnedModel};
use super::CemPlanner;

/// Artifact file names inside a run directory.
pub mod files {
    pub const CONFIG: &str = "config.toml";
    pub const WARMUP: &str = "warmup.csv";
    pub const MODEL: &str = "model.json";
    pub const MODEL_REPORT: &str = "model_report.json";
    pub const BACKUP: &str = "backup.json";
    pub const COST: &str = "cost.json";
    pub const VALUE: &str = "vp.json";
    pub const CERTIFICATE: &str = "certificate.json";
    pub const METRICS: &str = "metrics.csv";
    pub const TIMING: &str = "timing.csv";
    pub const SUMMARY: &str = "summary.json";
    pub const DIAGNOSTICS: &str = "diagnostics";
}

/// One row of `metrics.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub episode: usize,
    pub seed: u64,
    pub filtered: bool,
    pub episode_return: f64,
    pub cumulative_cost: f64,
    pub violations: usize,
    pub interventions: usize,
    pub mean_filter_distance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub name: String,
    pub seed: u64,
    pub filtered: bool,
    pub episodes: usize,
    pub mean_return: f64,
    pub mean_cost: f64,
    pub total_violations: usize,
    pub violating_episodes: usize,
    pub total_interventions: usize,
}

impl RunSummary {
    pub fn from_records(name: &str, seed: u64, filtered: bool, records: &[MetricsRecord]) -> Self {
        let n = records.len().max(1) as f64;
        Self {
            name: name.to_string(),
            seed,
            filtered,
            episodes: records.len(),
            mean_return: records.iter().map(|r| r.episode_return).sum::<f64>() / n,
            mean_cost: records.iter().map(|r| r.cumulative_cost).sum::<f64>() / n,
            total_violations: records.iter().map(|r| r.violations).sum(),
            violating_episodes: records.iter().filter(|r| r.violations > 0).count(),
            total_interventions: records.iter().map(|r| r.interventions).sum(),
        }
    }
}

/// Config and seed stamped into every JSON artifact.
fn stamp(mut c: Checkpoint, config: &ExperimentConfig, canonical: &str) -> Checkpoint {
    if !c.metadata.is_object() {
        c.metadata = serde_json::json!({});
    }
    let m = c.metadata.as_object_mut().expect("object");
    m.insert("experiment".into(), serde_json::Value::String(canonical.to_string()));
    m.insert("seed".into(), serde_json::json!(config.seed));
    c
}

fn write_json<T: Serialize>(path: &Path, config: &ExperimentConfig, canonical: &str, body: &T) -> Result<()> {
    let doc = serde_json::json!({
        "experiment": canonical,
        "seed": config.seed,
        "body": body,
    });
    std::fs::write(path, serde_json::to_string_pretty(&doc)?)?;
    Ok(())
}

/// The body of a document written by `write_json`.
pub fn read_json_body<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let doc: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(path)?)?;
    let body = doc
        .get("body")
        .cloned()
        .ok_or_else(|| Error::Format(format!("{} has no body", path.display())))?;
    Ok(serde_json::from_value(body)?)
}

pub struct EpisodeInputs<'a> {
    pub config: &'a ExperimentConfig,
    pub env: Arc<dyn Environment>,
    pub backup: &'a dyn Policy,
    pub vp: &'a GridValueFunction,
    pub cost: &'a ImmediateCost,
}

/// Nominal (optionally filtered) episodes on the true system. The model is
/// refit after every episode on all data so far; `Vp` stays fixed.
/// `on_episode` sees every record as it is produced.
pub fn run_episodes(
    inputs: &EpisodeInputs<'_>,
    model: &mut LearnedModel,
    buffer: &mut ReplayBuffer,
    mut on_episode: impl FnMut(&MetricsRecord, &[StepDiagnostics], f64) -> Result<()>,
) -> Result<Vec<MetricsRecord>> {
    let config = inputs.config;
    let env = inputs.env.clone();
    let quad = stages::quadrature_of(config, env.as_ref())?;
    let refit_epochs = match &config.model {
        ModelConfig::Ensemble(m) => m.refit_epochs,
        ModelConfig::Oracle(_) => 0,
    };
    let base = RandomSource::new(config.seed, streams::EPISODES);
    let refit_rng = RandomSource::new(config.seed, streams::REFIT);
    let mut records = Vec::with_capacity(config.episodes.count);
    for ep in 0..config.episodes.count {
        let started = Instant::now();
        let shared = model.shared();
        let reward_env = env.clone();
        let planner = CemPlanner::new(
            shared.clone(),
            Arc::new(move |x: &[f64], u: &[f64]| reward_env.reward(x, u)),
            env.action_bounds().clone(),
            config.nominal,
        )?;
        let filter = if config.episodes.filtered {
            Some(SafetyFilter::new(
                shared.as_ref(),
                inputs.vp,
                &quad,
                env.action_bounds().clone(),
                config.filter_config(),
            )?)
        } else {
            None
        };
        let rng = base.fork(ep as u64);
        let x0 = env.initial_state(&mut rng.fork(3)).into_inner();
        let out = rollout_filtered(
            env.as_ref(),
            &planner,
            inputs.backup,
            filter.as_ref(),
            inputs.cost,
            &x0,
            config.episodes.steps,
            &rng,
        )?;
        let m = &out.metrics;
        let record = MetricsRecord {
            episode: ep,
            seed: config.seed,
            filtered: config.episodes.filtered,
            episode_return: m.episode_return,
            cumulative_cost: m.cumulative_cost,
            violations: m.violations,
            interventions: m.interventions,
            mean_filter_distance: m.mean_distance(),
        };
        let t = &out.trajectory;
        for k in 0..t.horizon() {
            buffer.push(
                t.states[k].as_slice(),
                t.actions[k].as_slice(),
                t.states[k + 1].as_slice(),
            )?;
        }
        drop(filter);
        drop(planner);
        drop(shared);
        if refit_epochs > 0 && ep + 1 < config.episodes.count {
            model.refit(buffer, refit_epochs, config, &mut refit_rng.fork(ep as u64))?;
        }
        on_episode(&record, &out.steps, started.elapsed().as_secs_f64())?;
        records.push(record);
    }
    Ok(records)
}

pub struct RunOutcome {
    pub dir: PathBuf,
    pub summary: RunSummary,
    pub certificate: CertificateArtifact,
    pub records: Vec<MetricsRecord>,
}

/// Stage entry points. Each reads its inputs from `config.output_dir`,
/// writes its artifacts there and tags errors with its own name; the
/// pipeline is these five in order.
pub mod steps {
    use super::*;
    use crate::backup::BackupPolicy;
    use crate::harness::stages::{CostSpec, ModelReport};

    pub const FIT_MODEL: &str = "fit-model";
    pub const LEARN_BACKUP: &str = "learn-backup";
    pub const SOLVE_VALUE: &str = "solve-value";
    pub const CERTIFY: &str = "certify";
    pub const ROLLOUT: &str = "rollout";

    struct Run<'a> {
        config: &'a ExperimentConfig,
        dir: PathBuf,
        canonical: String,
        env: Arc<dyn Environment>,
    }

    impl<'a> Run<'a> {
        fn open(config: &'a ExperimentConfig) -> Result<Self> {
            config.validate()?;
            let dir = config.output_dir.clone();
            std::fs::create_dir_all(&dir)?;
            let canonical = config.to_toml_string()?;
            std::fs::write(dir.join(files::CONFIG), &canonical)?;
            let env = stages::build_environment(&config.environment)?;
            Ok(Self {
                config,
                dir,
                canonical,
                env,
            })
        }

        fn rng(&self, stream: u64) -> RandomSource {
            RandomSource::new(self.config.seed, stream)
        }

        fn save(&self, name: &str, c: Checkpoint) -> Result<()> {
            stamp(c, self.config, &self.canonical).save(&self.dir.join(name))
        }

        fn json<T: Serialize>(&self, name: &str, body: &T) -> Result<()> {
            write_json(&self.dir.join(name), self.config, &self.canonical, body)
        }

        fn buffer_capacity(&self) -> usize {
            let e = &self.config.episodes;
            match &self.config.model {
                ModelConfig::Ensemble(m) => m.buffer_capacity,
                ModelConfig::Oracle(_) => (e.warmup + e.count) * e.steps + 1,
            }
        }

        fn warmup(&self) -> Result<ReplayBuffer> {
            let path = self.dir.join(files::WARMUP);
            if !path.exists() {
                return Err(Error::MissingFile(path));
            }
            ReplayBuffer::read_csv(File::open(path)?, self.buffer_capacity())
        }

        fn model(&self) -> Result<LearnedModel> {
            LearnedModel::from_checkpoint(&Checkpoint::load(&self.dir.join(files::MODEL))?, self.env.clone())
        }

        fn backup(&self) -> Result<BackupPolicy> {
            BackupPolicy::from_checkpoint(&Checkpoint::load(&self.dir.join(files::BACKUP))?)
        }

        fn cost(&self) -> Result<ImmediateCost> {
            let spec: CostSpec = read_json_body(&self.dir.join(files::COST))?;
            spec.build(self.env.clone())
        }

        fn value(&self) -> Result<GridValueFunction> {
            GridValueFunction::from_checkpoint(&Checkpoint::load(&self.dir.join(files::VALUE))?)
        }
    }

    /// Warm-up episodes and the model fit.
    pub fn fit_model(config: &ExperimentConfig) -> Result<ModelReport> {
        let go = || -> Result<ModelReport> {
            let run = Run::open(config)?;
            let e = &config.episodes;
            let buffer = stages::collect_warmup(
                run.env.as_ref(),
                e.warmup,
                e.steps,
                run.buffer_capacity(),
                &run.rng(streams::WARMUP),
            )?;
            buffer.write_csv(BufWriter::new(File::create(run.dir.join(files::WARMUP))?))?;
            let (model, report) = stages::fit_model(config, run.env.clone(), &buffer, &run.rng(streams::MODEL))?;
            run.save(files::MODEL, model.to_checkpoint())?;
            run.json(files::MODEL_REPORT, &report)?;
            Ok(report)
        };
        go().map_err(|e| e.in_stage(FIT_MODEL))
    }

    pub fn learn_backup(config: &ExperimentConfig) -> Result<CostSpec> {
        let go = || -> Result<CostSpec> {
            let run = Run::open(config)?;
            let model = run.model()?;
            let b = stages::learn_backup(
                config,
                run.env.clone(),
                model.shared().as_ref(),
                &run.rng(streams::BACKUP),
            )?;
            run.save(files::BACKUP, b.policy.to_checkpoint())?;
            run.json(files::COST, &b.cost)?;
            Ok(b.cost)
        };
        go().map_err(|e| e.in_stage(LEARN_BACKUP))
    }

    pub fn solve_value(config: &ExperimentConfig) -> Result<GridValueFunction> {
        let go = || -> Result<GridValueFunction> {
            let run = Run::open(config)?;
            let (model, backup, cost) = (run.model()?, run.backup()?, run.cost()?);
            let sol = stages::solve_value(config, run.env.as_ref(), model.shared().as_ref(), &backup, &cost)?;
            run.save(files::VALUE, sol.value.to_checkpoint())?;
            Ok(sol.value)
        };
        go().map_err(|e| e.in_stage(SOLVE_VALUE))
    }

    pub fn certify(config: &ExperimentConfig) -> Result<CertificateArtifact> {
        let go = || -> Result<CertificateArtifact> {
            let run = Run::open(config)?;
            let (model, backup, cost, vp) = (run.model()?, run.backup()?, run.cost()?, run.value()?);
            let objective = stages::objective_of(config, cost)?;
            let art = stages::certify_stage(
                config,
                run.env.clone(),
                model.shared().as_ref(),
                &backup,
                &vp,
                &objective,
                &run.rng(streams::CERTIFICATE),
            )?;
            run.json(files::CERTIFICATE, &art)?;
            Ok(art)
        };
        go().map_err(|e| e.in_stage(CERTIFY))
    }

    /// Nominal episodes with per-episode refits, starting from the
    /// warm-up data and the fitted model.
    pub fn rollout(config: &ExperimentConfig) -> Result<(RunSummary, Vec<MetricsRecord>)> {
        let go = || -> Result<(RunSummary, Vec<MetricsRecord>)> {
            let run = Run::open(config)?;
            let (mut model, backup, cost, vp) = (run.model()?, run.backup()?, run.cost()?, run.value()?);
            let mut buffer = run.warmup()?;
            let records = episodes_to_dir(
                config,
                run.env.clone(),
                &mut model,
                &mut buffer,
                &backup,
                &vp,
                &cost,
                &run.dir,
            )?;
            let summary = RunSummary::from_records(&config.name, config.seed, config.episodes.filtered, &records);
            run.json(files::SUMMARY, &summary)?;
            Ok((summary, records))
        };
        go().map_err(|e| e.in_stage(ROLLOUT))
    }
}

/// Warm-up, model fit, backup, value solve, certificate and episodes. Every
/// stage writes its artifacts before the next starts, so a failure leaves
/// the earlier ones in place.
pub fn run_pipeline(config: &ExperimentConfig) -> Result<RunOutcome> {
    config.validate()?;
    steps::fit_model(config)?;
    steps::learn_backup(config)?;
    steps::solve_value(config)?;
    let certificate = steps::certify(config)?;
    let (summary, records) = steps::rollout(config)?;
    Ok(RunOutcome {
        dir: config.output_dir.clone(),
        summary,
        certificate,
        records,
    })
}

/// Runs the episode stage and streams `metrics.csv`, `timing.csv` and the
/// per-episode diagnostics into `dir`.
#[allow(clippy::too_many_arguments)]
pub fn episodes_to_dir(
    config: &ExperimentConfig,
    env: Arc<dyn Environment>,
    model: &mut LearnedModel,
    buffer: &mut ReplayBuffer,
    backup: &dyn Policy,
    vp: &GridValueFunction,
    cost: &ImmediateCost,
    dir: &Path,
) -> Result<Vec<MetricsRecord>> {
    let mut metrics = csv::Writer::from_path(dir.join(files::METRICS))?;
    let mut timing = csv::Writer::from_path(dir.join(files::TIMING))?;
    timing.write_record(["episode", "wall_time_s"])?;
    let diag_dir = dir.join(files::DIAGNOSTICS);
    if config.episodes.diagnostics {
        std::fs::create_dir_all(&diag_dir)?;
    }
    let inputs = EpisodeInputs {
        config,
        env,
        backup,
        vp,
        cost,
    };
    let records = run_episodes(&inputs, model, buffer, |rec, steps, secs| {
        metrics.serialize(rec)?;
        metrics.flush()?;
        timing.write_record([rec.episode.to_string(), format!("{secs:.6}")])?;
        timing.flush()?;
        if config.episodes.diagnostics {
            let f = File::create(diag_dir.join(format!("episode_{:04}.csv", rec.episode)))?;
            write_diagnostics_csv(BufWriter::new(f), steps)?;
        }
        Ok(())
    })?;
    Ok(records)
}

pub fn read_metrics(dir: &Path) -> Result<Vec<MetricsRecord>> {
    let path = dir.join(files::METRICS);
    if !path.exists() {
        return Err(Error::MissingFile(path));
    }
    let mut r = csv::Reader::from_path(&path)?;
    let rows = r
        .deserialize()
        .collect::<std::result::Result<Vec<MetricsRecord>, _>>()?;
    Ok(rows)
}

/// One summary row per run directory, named after the directory.
pub fn compare(run_dirs: &[PathBuf]) -> Result<Vec<RunSummary>> {
    if run_dirs.is_empty() {
        return Err(Error::invalid("compare needs at least one run directory"));
    }
    run_dirs
        .iter()
        .map(|d| {
            let records = read_metrics(d)?;
            let name = d
                .file_name()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| d.display().to_string());
            let seed = records.first().map_or(0, |r| r.seed);
            let filtered = records.first().is_some_and(|r| r.filtered);
            Ok(RunSummary::from_records(&name, seed, filtered, &records))
        })
        .collect()
}

pub fn write_summary_csv<W: Write>(out: W, rows: &[RunSummary]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Fixed-width text table of the summary rows.
pub fn format_table(rows: &[RunSummary]) -> String {
    let width = rows.iter().map(|r| r.name.len()).max().unwrap_or(3).max(3);
    let mut s = format!(
        "{:<width$}  {:>8}  {:>8}  {:>12}  {:>10}  {:>10}  {:>13}\n",
        "run", "filtered", "episodes", "mean_return", "mean_cost", "violations", "interventions"
    );
    for r in rows {
        s.push_str(&format!(
            "{:<width$}  {:>8}  {:>8}  {:>12.4}  {:>10.4}  {:>10}  {:>13}\n",
            r.name, r.filtered, r.episodes, r.mean_return, r.mean_cost, r.total_violations, r.total_interventions
        ));
    }
    s
}
