use std::path::Path;

use anyhow::{Context, Result};
use crpo_core::env::CharacterUniverse;
use crpo_core::report::{write_outcome, Summary};
use crpo_core::trainer::{train_with, TrainConfig};
use crpo_core::Execution;

use crate::config::{seed_dir, ExperimentConfig};

pub const UNIVERSE_JSON: &str = "universe.json";
pub const EXPERIMENT_TOML: &str = "experiment.toml";

/// Trains every seed of `cfg` under `out`, one directory per seed.
pub fn run_experiment(cfg: &ExperimentConfig, out: &Path, quiet: bool) -> Result<Vec<Summary>> {
    let universe = CharacterUniverse::build(&cfg.universe).context("universe")?;
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    universe.save_json(&out.join(UNIVERSE_JSON))?;
    std::fs::write(out.join(EXPERIMENT_TOML), cfg.resolved().to_toml()?)?;

    let mut summaries = Vec::with_capacity(cfg.seeds.len());
    for &seed in &cfg.seeds {
        let train = TrainConfig {
            seed,
            ..cfg.train.clone()
        };
        let started = std::time::Instant::now();
        let outcome = train_with(&train, &universe, Execution::default())
            .with_context(|| format!("training seed {seed}"))?;
        let dir = seed_dir(out, seed);
        write_outcome(&dir, &outcome).with_context(|| format!("writing {}", dir.display()))?;
        let summary = Summary::from_report(&outcome.report);
        if !quiet {
            println!(
                "seed {seed}: task {:.4} style {:.4} h_id {:.4} ({:.1}s) -> {}",
                summary.final_task.unwrap_or(f64::NAN),
                summary.final_style.unwrap_or(f64::NAN),
                summary.final_h_id.unwrap_or(f64::NAN),
                started.elapsed().as_secs_f64(),
                dir.display()
            );
        }
        summaries.push(summary);
    }
    Ok(summaries)
}
