//! Mixed sampling groups: on-policy persona responses plus forced anchors.

use std::collections::HashMap;
use std::io::{BufRead, Write};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::advantage::RewardBundle;
use crate::env::{anchor_prompt, CharacterUniverse, Prompt, TokenId};
use crate::error::{CrpoError, Result};
use crate::exec::{stream_rng, Execution};
use crate::policy::{PolicyParams, TrajectorySample};

/// `G` responses for one persona prompt. The last `anchor_count` members are
/// anchors sampled under the persona-stripped prompt.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleGroup {
    pub prompt: Prompt,
    pub members: Vec<TrajectorySample>,
    pub anchor_count: usize,
}

impl SampleGroup {
    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    /// Index of the first anchor member, if any.
    pub fn anchor_index(&self) -> Option<usize> {
        (self.anchor_count > 0).then(|| self.members.len() - self.anchor_count)
    }

    pub fn anchor(&self) -> Option<&TrajectorySample> {
        self.anchor_index().map(|i| &self.members[i])
    }

    pub fn on_policy(&self) -> &[TrajectorySample] {
        &self.members[..self.members.len() - self.anchor_count]
    }

    /// Scores every member against the group's persona prompt.
    pub fn rewards(&self, universe: &CharacterUniverse) -> Vec<RewardBundle> {
        self.members
            .iter()
            .map(|m| RewardBundle {
                r_task: universe.task_reward(&self.prompt, &m.tokens),
                r_style: universe.style_reward(&self.prompt, &m.tokens),
            })
            .collect()
    }
}

/// One group with a single anchor.
pub fn build_group(
    old: &PolicyParams,
    prompt: &Prompt,
    g: usize,
    temperature: f64,
    rng: &mut impl Rng,
) -> Result<SampleGroup> {
    build_group_with_anchors(old, prompt, g, 1, temperature, rng)
}

pub fn build_group_with_anchors(
    old: &PolicyParams,
    prompt: &Prompt,
    g: usize,
    anchors: usize,
    temperature: f64,
    rng: &mut impl Rng,
) -> Result<SampleGroup> {
    if g < 2 {
        return Err(CrpoError::GroupTooSmall { len: g });
    }
    if anchors >= g {
        return Err(CrpoError::invalid(format!(
            "{anchors} anchors leave no on-policy member in a group of {g}"
        )));
    }
    if prompt.is_anchor_prompt {
        return Err(CrpoError::invalid("group prompt must carry a persona"));
    }
    let own = old.distribution(prompt, temperature);
    let mut members: Vec<_> = (0..g - anchors).map(|_| own.sample(rng, false)).collect();
    if anchors > 0 {
        let generic = old.distribution(&anchor_prompt(prompt)?, temperature);
        members.extend((0..anchors).map(|_| generic.sample(rng, true)));
    }
    Ok(SampleGroup {
        prompt: *prompt,
        members,
        anchor_count: anchors,
    })
}

/// One group per prompt. Each group draws from its own stream keyed by
/// `(seed, character, query, occurrence)`, so the result does not depend on
/// prompt order or on the execution mode.
#[allow(clippy::too_many_arguments)]
pub fn batch_groups(
    old: &PolicyParams,
    prompts: &[Prompt],
    g: usize,
    anchors: usize,
    temperature: f64,
    seed: u64,
    exec: Execution,
) -> Result<Vec<SampleGroup>> {
    if prompts.is_empty() {
        return Err(CrpoError::Empty {
            what: "prompt list",
        });
    }
    let keyed = occurrence_keys(prompts);
    exec.try_map(&keyed, |_, (prompt, occ)| {
        let mut rng = stream_rng(
            seed,
            &[prompt.character_id as u64, prompt.query_id as u64, *occ],
        );
        build_group_with_anchors(old, prompt, g, anchors, temperature, &mut rng)
    })
}

pub(crate) fn occurrence_keys(prompts: &[Prompt]) -> Vec<(Prompt, u64)> {
    let mut seen: HashMap<Prompt, u64> = HashMap::new();
    prompts
        .iter()
        .map(|p| {
            let n = seen.entry(*p).or_insert(0);
            let key = (*p, *n);
            *n += 1;
            key
        })
        .collect()
}

/// One line of the rollout log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutRecord {
    pub step: usize,
    pub character_id: usize,
    pub query_id: usize,
    pub anchor_index: Option<usize>,
    pub anchor_count: usize,
    pub members: Vec<MemberRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemberRecord {
    pub tokens: Vec<TokenId>,
    pub logp_old: Vec<f64>,
    pub is_anchor: bool,
    pub r_task: f64,
    pub r_style: f64,
}

impl RolloutRecord {
    pub fn from_group(step: usize, group: &SampleGroup, rewards: &[RewardBundle]) -> Self {
        Self {
            step,
            character_id: group.prompt.character_id,
            query_id: group.prompt.query_id,
            anchor_index: group.anchor_index(),
            anchor_count: group.anchor_count,
            members: group
                .members
                .iter()
                .zip(rewards)
                .map(|(m, r)| MemberRecord {
                    tokens: m.tokens.clone(),
                    logp_old: m.logp_old.clone(),
                    is_anchor: m.is_anchor,
                    r_task: r.r_task,
                    r_style: r.r_style,
                })
                .collect(),
        }
    }

    /// Checks the documented schema: arrays of length `response_len`, anchors
    /// exactly where `anchor_index`/`anchor_count` say.
    pub fn validate(&self, response_len: usize) -> Result<()> {
        let fail = |msg: String| {
            Err(CrpoError::invalid(format!(
                "rollout record (step {}): {msg}",
                self.step
            )))
        };
        if self.members.len() < 2 {
            return fail(format!("{} members", self.members.len()));
        }
        for (i, m) in self.members.iter().enumerate() {
            if m.tokens.len() != response_len || m.logp_old.len() != response_len {
                return fail(format!(
                    "member {i} arrays are not of length {response_len}"
                ));
            }
        }
        let anchors: Vec<usize> = (0..self.members.len())
            .filter(|&i| self.members[i].is_anchor)
            .collect();
        if anchors.len() != self.anchor_count {
            return fail(format!(
                "{} anchors flagged, anchor_count {}",
                anchors.len(),
                self.anchor_count
            ));
        }
        if anchors.first().copied() != self.anchor_index {
            return fail(format!(
                "anchor_index {:?} does not match {:?}",
                self.anchor_index,
                anchors.first()
            ));
        }
        Ok(())
    }
}

pub fn write_jsonl<W: Write>(mut w: W, records: &[RolloutRecord]) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_jsonl<R: BufRead>(r: R) -> Result<Vec<RolloutRecord>> {
    r.lines()
        .filter(|l| !matches!(l, Ok(s) if s.trim().is_empty()))
        .map(|line| Ok(serde_json::from_str(&line?)?))
        .collect()
}
