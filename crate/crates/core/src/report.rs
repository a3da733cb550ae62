//! File formats for training output.
//!
//! `report.csv`: one row per iteration,
//! `step,mean_task,mean_style,mean_anchor_style,mean_h_id,kl_c<id>...,beta_c<id>...`
//! (`mean_anchor_style` is empty when groups carry no anchor).
//!
//! `kl.csv`: `step,character,h_c,r_h,d_targ,d_kl_observed,beta`.
//!
//! `advantages.csv`: `step,character,is_anchor,a_task,a_style,a_combined,h_id,a_gated`.
//!
//! `summary.json`: final metrics, per-character summary and the config echo.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{CrpoError, Result};
use crate::sampler::write_jsonl;
use crate::trainer::{
    AdvantageRow, CharacterSummary, KlRow, StepMetrics, TrainConfig, TrainOutcome, TrainReport,
};

pub const REPORT_CSV: &str = "report.csv";
pub const SUMMARY_JSON: &str = "summary.json";
pub const ROLLOUTS_JSONL: &str = "rollouts.jsonl";
pub const KL_CSV: &str = "kl.csv";
pub const ADVANTAGES_CSV: &str = "advantages.csv";
pub const CHECKPOINT_JSON: &str = "params.json";

pub fn report_header(personas: &[usize]) -> Vec<String> {
    let mut h: Vec<String> = [
        "step",
        "mean_task",
        "mean_style",
        "mean_anchor_style",
        "mean_h_id",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    h.extend(personas.iter().map(|c| format!("kl_c{c}")));
    h.extend(personas.iter().map(|c| format!("beta_c{c}")));
    h
}

pub fn write_report_csv<W: Write>(w: W, report: &TrainReport) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(report_header(&report.personas))?;
    for m in &report.steps {
        let mut row = vec![
            m.step.to_string(),
            m.mean_task.to_string(),
            m.mean_style.to_string(),
            m.mean_anchor_style
                .map(|x| x.to_string())
                .unwrap_or_default(),
            m.mean_h_id.to_string(),
        ];
        row.extend(m.kl.iter().map(f64::to_string));
        row.extend(m.beta.iter().map(f64::to_string));
        out.write_record(&row)?;
    }
    out.flush()?;
    Ok(())
}

/// Parses `report.csv` back into step metrics and the persona ids of its columns.
pub fn read_report_csv<R: Read>(r: R) -> Result<(Vec<usize>, Vec<StepMetrics>)> {
    let mut rdr = csv::Reader::from_reader(r);
    let header = rdr.headers()?.clone();
    let personas: Vec<usize> = header
        .iter()
        .filter_map(|h| h.strip_prefix("kl_c"))
        .map(|s| s.parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| CrpoError::invalid(format!("bad report header: {e}")))?;
    if header.len() != 5 + 2 * personas.len() {
        return Err(CrpoError::invalid(format!(
            "report header has {} columns",
            header.len()
        )));
    }
    let num = |s: &str| -> Result<f64> {
        s.parse::<f64>()
            .map_err(|e| CrpoError::invalid(format!("bad number {s:?} in report: {e}")))
    };
    let k = personas.len();
    let mut steps = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let f: Vec<&str> = rec.iter().collect();
        steps.push(StepMetrics {
            step: f[0]
                .parse()
                .map_err(|e| CrpoError::invalid(format!("bad step {:?}: {e}", f[0])))?,
            mean_task: num(f[1])?,
            mean_style: num(f[2])?,
            mean_anchor_style: if f[3].is_empty() {
                None
            } else {
                Some(num(f[3])?)
            },
            mean_h_id: num(f[4])?,
            kl: f[5..5 + k].iter().map(|s| num(s)).collect::<Result<_>>()?,
            beta: f[5 + k..5 + 2 * k]
                .iter()
                .map(|s| num(s))
                .collect::<Result<_>>()?,
        });
    }
    Ok((personas, steps))
}

pub fn write_kl_csv<W: Write>(w: W, rows: &[KlRow]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    for r in rows {
        out.serialize(r)?;
    }
    out.flush()?;
    Ok(())
}

pub fn write_advantages_csv<W: Write>(w: W, rows: &[AdvantageRow]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record([
        "step",
        "character",
        "is_anchor",
        "a_task",
        "a_style",
        "a_combined",
        "h_id",
        "a_gated",
    ])?;
    for r in rows {
        let a = &r.record;
        out.write_record([
            r.step.to_string(),
            r.character.to_string(),
            r.is_anchor.to_string(),
            a.a_task.to_string(),
            a.a_style.to_string(),
            a.a_combined.to_string(),
            a.h_id.to_string(),
            a.a_gated.to_string(),
        ])?;
    }
    out.flush()?;
    Ok(())
}

/// Final-step metrics and config echo.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub seed: u64,
    pub algorithm: String,
    pub universe_checksum: String,
    pub steps: usize,
    pub final_task: Option<f64>,
    pub final_style: Option<f64>,
    pub final_h_id: Option<f64>,
    pub val_task: f64,
    pub val_style: f64,
    pub h_global: f64,
    pub characters: Vec<CharacterSummary>,
    pub final_params_checksum: String,
    pub config: TrainConfig,
}

impl Summary {
    pub fn from_report(report: &TrainReport) -> Self {
        let last = report.final_step();
        Self {
            seed: report.config.seed,
            algorithm: report.config.algorithm.to_string(),
            universe_checksum: report.universe_checksum.clone(),
            steps: report.steps.len(),
            final_task: last.map(|m| m.mean_task),
            final_style: last.map(|m| m.mean_style),
            final_h_id: last.map(|m| m.mean_h_id),
            val_task: report.val_task,
            val_style: report.val_style,
            h_global: report.h_global,
            characters: report.characters.clone(),
            final_params_checksum: report.final_params_checksum.clone(),
            config: report.config.clone(),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_slice(&std::fs::read(path)?)?)
    }
}

/// Writes every artifact of one run into `dir` (created if missing).
pub fn write_outcome(dir: &Path, outcome: &TrainOutcome) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let create = |name: &str| -> Result<std::io::BufWriter<std::fs::File>> {
        Ok(std::io::BufWriter::new(std::fs::File::create(
            dir.join(name),
        )?))
    };
    write_report_csv(create(REPORT_CSV)?, &outcome.report)?;
    write_kl_csv(create(KL_CSV)?, &outcome.kl_rows)?;
    let mut rollouts = create(ROLLOUTS_JSONL)?;
    write_jsonl(&mut rollouts, &outcome.rollouts)?;
    rollouts.flush()?;
    if outcome.report.config.dump_advantages {
        write_advantages_csv(create(ADVANTAGES_CSV)?, &outcome.advantage_rows)?;
    }
    let mut summary = create(SUMMARY_JSON)?;
    serde_json::to_writer_pretty(&mut summary, &Summary::from_report(&outcome.report))?;
    summary.flush()?;
    outcome.params.save_checkpoint(&dir.join(CHECKPOINT_JSON))?;
    Ok(())
}
