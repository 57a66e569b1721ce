//! Experiment orchestration: configuration, stage functions, the
//! end-to-end pipeline and metrics.

mod config;
mod nominal;
mod pipeline;
pub mod stages;

pub use config::{
    BackupConfig, CertificateConfig, CostConfig, DriftScope, EnsembleModelConfig, EnvironmentConfig, EpisodeConfig,
    ExperimentConfig, GridConfig, ModelConfig, ObjectiveConfig, OracleModelConfig,
};
pub use nominal::{CemPlanner, PlannerConfig, RewardFn, UniformPolicy};
pub use pipeline::{
    compare, episodes_to_dir, files, format_table, read_json_body, read_metrics, run_episodes, run_pipeline, steps,
    write_summary_csv, EpisodeInputs, MetricsRecord, RunOutcome, RunSummary,
};
