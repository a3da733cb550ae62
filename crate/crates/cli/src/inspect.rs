use std::fmt::Write as _;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use crpo_core::env::CharacterUniverse;
use crpo_core::report::ROLLOUTS_JSONL;
use crpo_core::sampler::{read_jsonl, RolloutRecord};

use crate::run::UNIVERSE_JSON;

/// Accepts the JSONL file itself or a seed directory containing it.
pub fn rollout_path(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join(ROLLOUTS_JSONL)
    } else {
        path.to_path_buf()
    }
}

/// Looks for the universe file next to the log and in up to two parent directories.
pub fn find_universe(log: &Path) -> Option<CharacterUniverse> {
    log.ancestors()
        .skip(1)
        .take(3)
        .map(|d| d.join(UNIVERSE_JSON))
        .find(|p| p.is_file())
        .and_then(|p| CharacterUniverse::load_json(&p).ok())
}

pub fn select(
    records: &[RolloutRecord],
    step: Option<usize>,
    index: usize,
) -> Result<&RolloutRecord> {
    let step = match step {
        Some(s) => s,
        None => records.first().context("rollout log is empty")?.step,
    };
    let at_step: Vec<&RolloutRecord> = records.iter().filter(|r| r.step == step).collect();
    if at_step.is_empty() {
        let mut steps: Vec<usize> = records.iter().map(|r| r.step).collect();
        steps.dedup();
        bail!("no groups logged at step {step}; logged steps: {steps:?}");
    }
    at_step.get(index).copied().with_context(|| {
        format!(
            "step {step} has {} groups, index {index} out of range",
            at_step.len()
        )
    })
}

fn token_label(
    u: Option<&CharacterUniverse>,
    rec: &RolloutRecord,
    pos: usize,
    tok: usize,
) -> String {
    let Some(u) = u else { return tok.to_string() };
    let (Some(q), Some(c)) = (
        u.queries.get(rec.query_id),
        u.characters.get(rec.character_id),
    ) else {
        return tok.to_string();
    };
    let tag = if pos == 0 && q.focus_token_by_character.get(rec.character_id) == Some(&tok) {
        "F"
    } else if pos > 0 && tok == q.answer_token {
        "A"
    } else if c.style_markers.contains(&tok) {
        "M"
    } else {
        ""
    };
    format!("{tok}{tag}")
}

pub fn render(rec: &RolloutRecord, universe: Option<&CharacterUniverse>) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "step {}  character {}  query {}  members {}  anchors {}",
        rec.step,
        rec.character_id,
        rec.query_id,
        rec.members.len(),
        rec.anchor_count
    );
    if let Some(u) = universe {
        if let Some(c) = u.characters.get(rec.character_id) {
            let _ = writeln!(
                s,
                "markers {:?}  (F focus, A answer, M marker)",
                c.style_markers
            );
        }
    }
    let _ = writeln!(
        s,
        "{:>3}  {:<7} {:>7} {:>8} {:>10}  tokens",
        "#", "kind", "r_task", "r_style", "logp_old"
    );
    for (i, m) in rec.members.iter().enumerate() {
        let tokens: Vec<String> = m
            .tokens
            .iter()
            .enumerate()
            .map(|(pos, &t)| token_label(universe, rec, pos, t))
            .collect();
        let _ = writeln!(
            s,
            "{i:>3}  {:<7} {:>7.3} {:>8.3} {:>10.4}  [{}]",
            if m.is_anchor { "anchor" } else { "policy" },
            m.r_task,
            m.r_style,
            m.logp_old.iter().sum::<f64>(),
            tokens.join(" ")
        );
    }
    s
}

pub fn inspect(path: &Path, step: Option<usize>, index: usize) -> Result<String> {
    let log = rollout_path(path);
    let file = std::fs::File::open(&log).with_context(|| format!("opening {}", log.display()))?;
    let records =
        read_jsonl(BufReader::new(file)).with_context(|| format!("parsing {}", log.display()))?;
    let rec = select(&records, step, index)?;
    let universe = find_universe(&log);
    let len = universe
        .as_ref()
        .map(|u| u.response_len)
        .unwrap_or_else(|| rec.members[0].tokens.len());
    rec.validate(len)?;
    Ok(render(rec, universe.as_ref()))
}
