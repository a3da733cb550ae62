//! Cross-seed aggregation of run directories.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use crpo_core::report::{read_report_csv, Summary, REPORT_CSV, SUMMARY_JSON};
use crpo_core::trainer::StepMetrics;
use serde::Serialize;

/// One seed's output directory.
pub struct SeedRun {
    pub summary: Summary,
    pub steps: Vec<StepMetrics>,
}

/// All seeds found under one input directory.
pub struct Condition {
    pub label: String,
    pub dir: PathBuf,
    pub runs: Vec<SeedRun>,
}

impl Condition {
    pub fn algorithm(&self) -> &str {
        &self.runs[0].summary.algorithm
    }

    pub fn checksum(&self) -> &str {
        &self.runs[0].summary.universe_checksum
    }
}

fn load_seed(dir: &Path) -> Result<SeedRun> {
    let summary = Summary::load(&dir.join(SUMMARY_JSON))
        .with_context(|| format!("reading {}", dir.display()))?;
    let file = std::fs::File::open(dir.join(REPORT_CSV))
        .with_context(|| format!("opening report in {}", dir.display()))?;
    let (_, steps) = read_report_csv(file)?;
    Ok(SeedRun { summary, steps })
}

/// Loads either a single seed directory or a run directory of `seed-*` children.
pub fn load_condition(dir: &Path) -> Result<Condition> {
    let label = dir
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| dir.display().to_string());
    let runs = if dir.join(SUMMARY_JSON).is_file() {
        vec![load_seed(dir)?]
    } else {
        let mut children: Vec<PathBuf> = std::fs::read_dir(dir)
            .with_context(|| format!("reading {}", dir.display()))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.join(SUMMARY_JSON).is_file())
            .collect();
        children.sort();
        children
            .iter()
            .map(|p| load_seed(p))
            .collect::<Result<Vec<_>>>()?
    };
    if runs.is_empty() {
        bail!("{}: no {SUMMARY_JSON} found", dir.display());
    }
    let cond = Condition {
        label,
        dir: dir.to_path_buf(),
        runs,
    };
    for r in &cond.runs {
        if r.summary.universe_checksum != cond.checksum() {
            bail!(
                "universe checksum mismatch inside {}: {} vs {}",
                dir.display(),
                cond.checksum(),
                r.summary.universe_checksum
            );
        }
    }
    Ok(cond)
}

pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

#[derive(Debug, Serialize)]
pub struct CompareRow<'a> {
    pub condition: &'a str,
    pub algorithm: &'a str,
    pub step: usize,
    pub metric: &'static str,
    pub n: usize,
    pub mean: f64,
    pub std: f64,
}

type Metric = fn(&StepMetrics) -> Option<f64>;

const METRICS: [(&str, Metric); 4] = [
    ("mean_task", |m| Some(m.mean_task)),
    ("mean_style", |m| Some(m.mean_style)),
    ("mean_h_id", |m| Some(m.mean_h_id)),
    ("mean_anchor_style", |m| m.mean_anchor_style),
];

pub struct Comparison {
    pub conditions: Vec<Condition>,
    pub baseline: usize,
}

impl Comparison {
    pub fn new(dirs: &[PathBuf]) -> Result<Self> {
        if dirs.len() < 2 {
            bail!("need ≥ 2 report directories, got {}", dirs.len());
        }
        let conditions = dirs
            .iter()
            .map(|d| load_condition(d))
            .collect::<Result<Vec<_>>>()?;
        let first = &conditions[0];
        for c in &conditions[1..] {
            if c.checksum() != first.checksum() {
                bail!(
                    "universe mismatch: {} has checksum {} but {} has checksum {}",
                    first.dir.display(),
                    first.checksum(),
                    c.dir.display(),
                    c.checksum()
                );
            }
        }
        // Deltas are reported against the first GRPO condition when there is one.
        let baseline = conditions
            .iter()
            .position(|c| c.algorithm() == "grpo")
            .unwrap_or(0);
        Ok(Self {
            conditions,
            baseline,
        })
    }

    /// Per-step mean and std over seeds, truncated to the shortest seed.
    pub fn rows(&self) -> Vec<CompareRow<'_>> {
        let mut rows = Vec::new();
        for c in &self.conditions {
            let len = c.runs.iter().map(|r| r.steps.len()).min().unwrap_or(0);
            for i in 0..len {
                for (name, get) in METRICS {
                    let xs: Vec<f64> = c.runs.iter().filter_map(|r| get(&r.steps[i])).collect();
                    if xs.is_empty() {
                        continue;
                    }
                    let (mean, std) = mean_std(&xs);
                    rows.push(CompareRow {
                        condition: &c.label,
                        algorithm: c.algorithm(),
                        step: c.runs[0].steps[i].step,
                        metric: name,
                        n: xs.len(),
                        mean,
                        std,
                    });
                }
            }
        }
        rows
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv_writer(path)?;
        for r in self.rows() {
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(())
    }

    fn finals(c: &Condition) -> BTreeMap<&'static str, (f64, f64)> {
        let mut out = BTreeMap::new();
        for (name, get) in METRICS {
            let xs: Vec<f64> = c
                .runs
                .iter()
                .filter_map(|r| r.steps.last().and_then(get))
                .collect();
            if !xs.is_empty() {
                out.insert(name, mean_std(&xs));
            }
        }
        out
    }

    pub fn text_summary(&self) -> String {
        let base = Self::finals(&self.conditions[self.baseline]);
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:<20} {:<5} {:>5} {:>17} {:>17} {:>17} {:>11} {:>11}",
            "condition",
            "algo",
            "seeds",
            "final task",
            "final style",
            "final h_id",
            "Δtask",
            "Δstyle"
        );
        for (i, c) in self.conditions.iter().enumerate() {
            let f = Self::finals(c);
            let cell = |k: &str| {
                f.get(k)
                    .map(|(m, sd)| format!("{m:.4} ± {sd:.4}"))
                    .unwrap_or_else(|| "-".into())
            };
            let delta = |k: &str| match (f.get(k), base.get(k)) {
                _ if i == self.baseline => "(baseline)".to_string(),
                (Some(a), Some(b)) => format!("{:+.4}", a.0 - b.0),
                _ => "-".into(),
            };
            let _ = writeln!(
                s,
                "{:<20} {:<5} {:>5} {:>17} {:>17} {:>17} {:>11} {:>11}",
                c.label,
                c.algorithm(),
                c.runs.len(),
                cell("mean_task"),
                cell("mean_style"),
                cell("mean_h_id"),
                delta("mean_task"),
                delta("mean_style"),
            );
        }
        s
    }
}

pub fn csv_writer(path: &Path) -> Result<csv::Writer<std::fs::File>> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    csv::Writer::from_path(path).with_context(|| format!("creating {}", path.display()))
}
