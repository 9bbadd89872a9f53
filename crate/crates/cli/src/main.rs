//! `rollmini` command-line interface.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use log::info;
use rollmini_core::pipeline::{report, tasks, Pipeline, PipelineError, RunConfig};
use rollmini_core::resource_pool::{colocation_report, ResourcePool};

#[derive(Parser)]
#[command(name = "rollmini", version, about = "Run and inspect RL post-training pipelines")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Overrides {
    /// Directory for metrics, events, checkpoints and the colocation report.
    #[arg(long)]
    output_dir: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Total number of training steps.
    #[arg(long)]
    steps: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Train from scratch.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Continue a run from a checkpoint.
    Resume {
        #[arg(long)]
        config: PathBuf,
        /// Checkpoint file (`checkpoints/step_N.ckpt`).
        #[arg(long)]
        resume: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Summarize `metrics.jsonl` of a run directory.
    Report {
        /// Run directory or metrics file.
        path: PathBuf,
        /// Also write `metrics.csv` next to the metrics file.
        #[arg(long)]
        csv: bool,
    },
    /// Check a config and print the device placement.
    ValidateConfig {
        #[arg(long)]
        config: PathBuf,
    },
    /// Write the built-in task datasets (`math`, `code`, `general`).
    GenDataset {
        #[arg(long)]
        out: PathBuf,
    },
}

fn load(path: &Path, o: &Overrides) -> Result<RunConfig> {
    let mut config = RunConfig::load(path).with_context(|| format!("loading {}", path.display()))?;
    if let Some(d) = &o.output_dir {
        config.output_dir = d.clone();
    }
    if let Some(s) = o.seed {
        config.seed = s;
    }
    if let Some(n) = o.steps {
        config.total_steps = n;
    }
    Ok(config)
}

fn train(mut pipeline: Pipeline) -> Result<()> {
    let total = pipeline.config().total_steps;
    while pipeline.step_index() < total {
        let r = pipeline.step()?;
        let headline = r.success_rate.or(r.accuracy).unwrap_or(r.mean_reward);
        info!("step {:>4}  score {headline:.3}  reward {:.3}  loss {:+.4}  version {}", r.step, r.mean_reward, r.loss, r.params_version);
    }
    pipeline.finish()?;
    println!("finished {total} steps; outputs in {}", pipeline.config().output_dir.display());
    Ok(())
}

fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run { config, overrides } => {
            let config = load(&config, &overrides)?;
            train(Pipeline::new(config)?)
        }
        Command::Resume { config, resume, overrides } => {
            let config = load(&config, &overrides)?;
            train(Pipeline::resume(config, &resume)?)
        }
        Command::Report { path, csv } => {
            let metrics = if path.is_dir() { path.join("metrics.jsonl") } else { path };
            let records = report::read_metrics(&metrics)?;
            if records.is_empty() {
                bail!("{} has no records", metrics.display());
            }
            print!("{}", report::summarize(&records).to_table());
            if csv {
                let out = metrics.with_extension("csv");
                std::fs::write(&out, report::to_csv(&records)).with_context(|| format!("writing {}", out.display()))?;
                println!("wrote {}", out.display());
            }
            Ok(())
        }
        Command::ValidateConfig { config } => {
            let config = RunConfig::load(&config)?;
            config.validate()?;
            let mut pool = ResourcePool::create(config.devices.clone())?;
            let plan = pool.bind_roles(&config.mapping(), &config.clusters.roles())?;
            print!("{}", colocation_report(&plan).to_table());
            println!("config ok (hash {})", config.config_hash());
            Ok(())
        }
        Command::GenDataset { out } => {
            for (domain, n) in tasks::write_datasets(&out)? {
                println!("{domain}: {n} tasks");
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("ROLLMINI_LOG_LEVEL", "info")).format_timestamp(None).init();
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if let Some(PipelineError::Halted { checkpoint, .. }) = e.downcast_ref::<PipelineError>() {
                eprintln!("resume with: rollmini resume --config <config> --resume {}", checkpoint.display());
            }
            ExitCode::FAILURE
        }
    }
}
