//! One-axis sweeps and mechanism knock-outs.

use std::path::Path;

use anyhow::{bail, Context, Result};
use clap::ValueEnum;
use serde::Serialize;

use crate::compare::{csv_writer, mean_std};
use crate::config::ExperimentConfig;
use crate::run::run_experiment;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
#[value(rename_all = "snake_case")]
pub enum Axis {
    AnchorsPerGroup,
    Lambda,
    Gamma,
    /// Values name the mechanism to switch off: full, dual-stream, adaptation, anchor.
    Mechanism,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Mechanism {
    DualStream,
    Adaptation,
    Anchor,
}

impl Mechanism {
    pub fn disable(self, cfg: &mut ExperimentConfig) {
        match self {
            Mechanism::DualStream => cfg.train.dual_stream = false,
            Mechanism::Adaptation => {
                cfg.train.gating = false;
                cfg.train.kl_relaxation = false;
            }
            Mechanism::Anchor => cfg.train.anchors_per_group = 0,
        }
    }
}

impl Axis {
    pub fn name(self) -> &'static str {
        match self {
            Axis::AnchorsPerGroup => "anchors_per_group",
            Axis::Lambda => "lambda",
            Axis::Gamma => "gamma",
            Axis::Mechanism => "mechanism",
        }
    }

    /// Returns the config for one sweep point, rejecting values that are
    /// malformed or that the trainer would refuse.
    pub fn apply(self, base: &ExperimentConfig, value: &str) -> Result<ExperimentConfig> {
        let mut cfg = base.clone();
        let number = || -> Result<f64> {
            let v: f64 = value
                .trim()
                .parse()
                .with_context(|| format!("{}: {value:?} is not a number", self.name()))?;
            if !v.is_finite() {
                bail!("{}: {value:?} is not finite", self.name());
            }
            Ok(v)
        };
        match self {
            Axis::AnchorsPerGroup => {
                cfg.train.anchors_per_group = value
                    .trim()
                    .parse()
                    .with_context(|| format!("anchors_per_group: {value:?} is not a non-negative integer"))?;
            }
            Axis::Lambda => cfg.train.lambda = number()?,
            Axis::Gamma => cfg.train.gate.gamma = number()?,
            Axis::Mechanism => match value.trim() {
                "full" => {}
                other => Mechanism::from_str(other, true)
                    .map_err(|_| anyhow::anyhow!("mechanism: unknown value {other:?} (full, dual-stream, adaptation, anchor)"))?
                    .disable(&mut cfg),
            },
        }
        cfg.train
            .validate()
            .with_context(|| format!("{} = {value}", self.name()))?;
        Ok(cfg)
    }
}

#[derive(Debug, Serialize)]
pub struct SweepRow {
    pub axis: &'static str,
    pub value: String,
    pub seeds: usize,
    pub final_task_mean: f64,
    pub final_task_std: f64,
    pub final_style_mean: f64,
    pub final_style_std: f64,
    pub final_h_id_mean: f64,
    pub val_task_mean: f64,
    pub val_style_mean: f64,
}

pub const SWEEP_CSV: &str = "sweep.csv";

/// Validates every point first, then trains each value on every seed.
pub fn ablate(
    base: &ExperimentConfig,
    axis: Axis,
    values: &[String],
    out: &Path,
    quiet: bool,
) -> Result<Vec<SweepRow>> {
    if values.is_empty() {
        bail!("values: list is empty");
    }
    let points = values
        .iter()
        .map(|v| axis.apply(base, v).map(|c| (v.trim().to_string(), c)))
        .collect::<Result<Vec<_>>>()?;
    let mut rows = Vec::with_capacity(points.len());
    for (value, cfg) in &points {
        if !quiet {
            println!("{} = {value}", axis.name());
        }
        let dir = out.join(format!("{}={value}", axis.name()));
        let summaries = run_experiment(cfg, &dir, quiet)?;
        let col = |f: &dyn Fn(&crpo_core::report::Summary) -> f64| -> (f64, f64) {
            mean_std(&summaries.iter().map(f).collect::<Vec<_>>())
        };
        let task = col(&|s| s.final_task.unwrap_or(f64::NAN));
        let style = col(&|s| s.final_style.unwrap_or(f64::NAN));
        rows.push(SweepRow {
            axis: axis.name(),
            value: value.clone(),
            seeds: summaries.len(),
            final_task_mean: task.0,
            final_task_std: task.1,
            final_style_mean: style.0,
            final_style_std: style.1,
            final_h_id_mean: col(&|s| s.final_h_id.unwrap_or(f64::NAN)).0,
            val_task_mean: col(&|s| s.val_task).0,
            val_style_mean: col(&|s| s.val_style).0,
        });
    }
    let mut w = csv_writer(&out.join(SWEEP_CSV))?;
    for r in &rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(rows)
}
