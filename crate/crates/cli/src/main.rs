//! `crpo-lab`: run, compare and ablate CRPO/GRPO training experiments.

mod ablate;
mod compare;
mod config;
mod inspect;
mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand};

use crate::ablate::{ablate, Axis};
use crate::compare::Comparison;
use crate::config::{ExperimentConfig, Overrides};

#[derive(Debug, Parser)]
#[command(
    name = "crpo-lab",
    version,
    about = "Tabular CRPO/GRPO experiment runner"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train every configured seed and write per-seed reports.
    Run {
        /// TOML experiment config; built-in defaults when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[command(flatten)]
        overrides: Overrides,
        /// Validate and print the resolved config without training.
        #[arg(long)]
        dry_run: bool,
    },
    /// Aggregate run directories across seeds and report final-step deltas.
    Compare {
        /// Run or seed directories (at least two).
        dirs: Vec<PathBuf>,
        /// Where to write the per-step CSV.
        #[arg(long, default_value = "compare.csv")]
        out: PathBuf,
    },
    /// Sweep one axis (or knock out one mechanism at a time).
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_enum)]
        axis: Axis,
        /// Comma-separated values for the axis.
        #[arg(long, value_delimiter = ',', num_args = 0..)]
        values: Vec<String>,
        #[command(flatten)]
        overrides: Overrides,
        /// Validate every sweep point and print them without training.
        #[arg(long)]
        dry_run: bool,
    },
    /// Pretty-print one logged rollout group.
    Inspect {
        /// rollouts.jsonl or the seed directory holding it.
        path: PathBuf,
        /// Logged step to show; the first logged step by default.
        #[arg(long)]
        step: Option<usize>,
        /// Which group within that step.
        #[arg(long, default_value_t = 0)]
        index: usize,
    },
}

fn load(config: &Option<PathBuf>, overrides: &Overrides) -> Result<ExperimentConfig> {
    let mut cfg = match config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    cfg.apply(overrides);
    cfg.validate()?;
    Ok(cfg)
}

fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run {
            config,
            overrides,
            dry_run,
        } => {
            let cfg = load(&config, &overrides)?;
            if dry_run {
                print!("{}", cfg.resolved().to_toml()?);
                return Ok(());
            }
            run::run_experiment(&cfg, &cfg.out_dir, false)?;
        }
        Command::Compare { dirs, out } => {
            let cmp = Comparison::new(&dirs)?;
            cmp.write_csv(&out)?;
            print!("{}", cmp.text_summary());
            println!("per-step table: {}", out.display());
        }
        Command::Ablate {
            config,
            axis,
            values,
            overrides,
            dry_run,
        } => {
            let cfg = load(&config, &overrides)?;
            if dry_run {
                if values.is_empty() {
                    anyhow::bail!("values: list is empty");
                }
                for v in &values {
                    axis.apply(&cfg, v)?;
                    println!("{} = {} ok", axis.name(), v.trim());
                }
                return Ok(());
            }
            let rows = ablate(&cfg, axis, &values, &cfg.out_dir, false)?;
            for r in &rows {
                println!(
                    "{} = {:<12} task {:.4} ± {:.4}  style {:.4} ± {:.4}",
                    r.axis,
                    r.value,
                    r.final_task_mean,
                    r.final_task_std,
                    r.final_style_mean,
                    r.final_style_std
                );
            }
            println!(
                "sweep table: {}",
                cfg.out_dir.join(ablate::SWEEP_CSV).display()
            );
        }
        Command::Inspect { path, step, index } => {
            print!("{}", inspect::inspect(&path, step, index)?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
