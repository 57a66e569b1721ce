use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use safety_filter::harness::{compare, format_table, run_pipeline, steps, write_summary_csv, ExperimentConfig};

/// Confidence-based safety filter experiments.
#[derive(Debug, Parser)]
#[command(version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct RunArgs {
    /// Experiment config (TOML).
    #[arg(short, long)]
    config: PathBuf,
    /// Overrides `output_dir` from the config.
    #[arg(short, long)]
    out: Option<PathBuf>,
    /// Overrides `seed` from the config.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Collect warm-up data and fit the model.
    FitModel(RunArgs),
    /// Learn the backup policy on the fitted model.
    LearnBackup(RunArgs),
    /// Solve the pessimistic value of the backup on the grid.
    SolveValue(RunArgs),
    /// Check the drift condition and compute the escape bound.
    Certify(RunArgs),
    /// Run the nominal episodes, filtered unless the config says otherwise.
    Rollout {
        #[command(flatten)]
        run: RunArgs,
        /// Run the nominal policy without the filter.
        #[arg(long)]
        unfiltered: bool,
    },
    /// Summarize the metrics of several run directories.
    Compare {
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        /// Also write the summary as CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// All stages in order.
    RunPipeline(RunArgs),
}

fn load(args: &RunArgs) -> Result<ExperimentConfig> {
    let mut c = ExperimentConfig::load(&args.config).with_context(|| format!("loading {}", args.config.display()))?;
    if let Some(out) = &args.out {
        c.output_dir = out.clone();
    }
    if let Some(seed) = args.seed {
        c.seed = seed;
    }
    c.validate()?;
    Ok(c)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::FitModel(a) => {
            let r = steps::fit_model(&load(&a)?)?;
            println!(
                "fitted {} model on {} transitions, beta {:.4}",
                r.kind, r.train_transitions, r.beta
            );
            if let Some(rmse) = r.holdout_rmse {
                println!("held-out rmse {rmse:.4e}");
            }
        }
        Command::LearnBackup(a) => {
            steps::learn_backup(&load(&a)?)?;
            println!("backup policy written");
        }
        Command::SolveValue(a) => {
            let vp = steps::solve_value(&load(&a)?)?;
            println!(
                "value solved on {} nodes, range [{:.4}, {:.4}]",
                vp.grid().len(),
                vp.min_value(),
                vp.max_value()
            );
        }
        Command::Certify(a) => {
            let art = steps::certify(&load(&a)?)?;
            match &art.report {
                Some(r) if art.certified => println!("certified: delta_fl {:.4e} over {} steps", r.delta_fl, r.k),
                _ => println!("not certified: {}", art.reason.as_deref().unwrap_or("unknown")),
            }
            if let Some(d) = &art.drift {
                let lambda = d.lambda_max.map_or("none".to_string(), |l| format!("{l:.4}"));
                println!(
                    "drift rate {lambda} over {} nodes, {} floor violations",
                    d.nodes_checked, d.floor_violations
                );
            }
        }
        Command::Rollout { run, unfiltered } => {
            let mut c = load(&run)?;
            if unfiltered {
                c.episodes.filtered = false;
            }
            let (summary, _) = steps::rollout(&c)?;
            print!("{}", format_table(&[summary]));
        }
        Command::Compare { runs, csv } => {
            let rows = compare(&runs)?;
            print!("{}", format_table(&rows));
            if let Some(path) = csv {
                write_summary_csv(std::fs::File::create(&path)?, &rows)?;
            }
        }
        Command::RunPipeline(a) => {
            let out = run_pipeline(&load(&a)?)?;
            print!("{}", format_table(&[out.summary]));
            println!("artifacts in {}", out.dir.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
