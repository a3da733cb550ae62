//! Training loop for CRPO and the vanilla GRPO baseline.

use serde::{Deserialize, Serialize};

use crate::adapt::{
    character_entropy, gate_advantage, identification_entropy, identification_ratio,
    CharacterKLState, GateParams,
};
use crate::advantage::{
    combine, grpo_advantage, style_advantage_global, style_advantage_renorm, task_advantage,
    AdvantageRecord, CharacterStyleStats, RewardBundle, DEFAULT_EPS, DEFAULT_STYLE_DECAY,
};
use crate::env::{anchor_prompt, CharacterUniverse, Prompt, TokenId};
use crate::error::{CrpoError, Result};
use crate::exec::{stream_rng, Execution};
use crate::objective::{measure_kl, objective_gradient, ObjectiveOptions};
use crate::policy::{sequence_log_prob, PolicyParams, PriorConfig};
use crate::sampler::{batch_groups, RolloutRecord, SampleGroup};

use rand::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algorithm {
    Crpo,
    Grpo,
}

impl std::fmt::Display for Algorithm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Algorithm::Crpo => "crpo",
            Algorithm::Grpo => "grpo",
        })
    }
}

impl std::str::FromStr for Algorithm {
    type Err = CrpoError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "crpo" => Ok(Algorithm::Crpo),
            "grpo" => Ok(Algorithm::Grpo),
            other => Err(CrpoError::invalid(format!(
                "unknown algorithm {other:?} (expected crpo or grpo)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub algorithm: Algorithm,
    pub group_size: usize,
    pub lambda: f64,
    pub gate: GateParams,
    pub clip_eps: f64,
    pub lr: f64,
    /// Rollout/update iterations.
    pub epochs: usize,
    /// Prompts drawn (with replacement) per iteration.
    pub rollout_batch: usize,
    pub anchors_per_group: usize,
    pub seed: u64,
    pub eps: f64,
    pub temperature_train: f64,
    pub temperature_val: f64,
    pub beta_init: f64,
    pub style_decay: f64,
    /// Separate task/style normalization; off means Eq.-1 style mixing of the summed reward.
    pub dual_stream: bool,
    /// Instance-level identification-entropy gate.
    pub gating: bool,
    /// Entropy-ratio relaxation of the per-character KL target.
    pub kl_relaxation: bool,
    /// Proportional beta controller; off keeps beta at `beta_init`.
    pub kl_control: bool,
    pub train_on_anchor: bool,
    pub prior: PriorConfig,
    /// Rollout log cadence in iterations; the final iteration is always logged. 0 logs only the final one.
    pub rollout_log_interval: usize,
    pub dump_advantages: bool,
    /// Samples per prompt for the final validation pass.
    pub val_samples: usize,
    /// Accepted for configuration compatibility; no method step consumes it.
    pub reshaping_threshold: Option<f64>,
    /// Accepted for configuration compatibility; no method step consumes it.
    pub boosting_coefficient: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            algorithm: Algorithm::Crpo,
            group_size: 7,
            lambda: 0.55,
            gate: GateParams::default(),
            clip_eps: 0.2,
            lr: 0.05,
            epochs: 300,
            rollout_batch: 512,
            anchors_per_group: 1,
            seed: 1,
            eps: DEFAULT_EPS,
            temperature_train: 1.0,
            temperature_val: 0.5,
            beta_init: 0.01,
            style_decay: DEFAULT_STYLE_DECAY,
            dual_stream: true,
            gating: true,
            kl_relaxation: true,
            kl_control: true,
            train_on_anchor: true,
            prior: PriorConfig::default(),
            rollout_log_interval: 50,
            dump_advantages: false,
            val_samples: 16,
            reshaping_threshold: None,
            boosting_coefficient: None,
        }
    }
}

impl TrainConfig {
    pub fn grpo() -> Self {
        Self {
            algorithm: Algorithm::Grpo,
            ..Self::default()
        }
        .resolved()
    }

    /// Applies the baseline's forced settings: no dual stream, no anchors,
    /// no gating, fixed beta.
    pub fn resolved(mut self) -> Self {
        if self.algorithm == Algorithm::Grpo {
            self.dual_stream = false;
            self.anchors_per_group = 0;
            self.gating = false;
            self.kl_relaxation = false;
            self.kl_control = false;
        }
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, msg: String| Err(CrpoError::invalid(format!("{field}: {msg}")));
        if self.group_size < 2 {
            return bad(
                "group_size",
                format!("must be at least 2, got {}", self.group_size),
            );
        }
        if self.anchors_per_group >= self.group_size {
            return bad(
                "anchors_per_group",
                format!(
                    "{} leaves no on-policy member in groups of {}",
                    self.anchors_per_group, self.group_size
                ),
            );
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return bad("lambda", format!("must lie in [0,1], got {}", self.lambda));
        }
        if !(self.clip_eps > 0.0 && self.clip_eps < 1.0) {
            return bad(
                "clip_eps",
                format!("must lie in (0,1), got {}", self.clip_eps),
            );
        }
        for (name, v) in [
            ("lr", self.lr),
            ("eps", self.eps),
            ("temperature_train", self.temperature_train),
            ("temperature_val", self.temperature_val),
            ("beta_init", self.beta_init),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(name, format!("must be positive, got {v}"));
            }
        }
        if !(self.style_decay > 0.0 && self.style_decay < 1.0) {
            return bad(
                "style_decay",
                format!("must lie in (0,1), got {}", self.style_decay),
            );
        }
        if self.rollout_batch == 0 {
            return bad("rollout_batch", "must be positive".into());
        }
        self.gate.validate()
    }
}

/// Metrics for one iteration. Per-character vectors follow persona order (ids 1..C).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    pub mean_task: f64,
    pub mean_style: f64,
    pub mean_anchor_style: Option<f64>,
    pub mean_h_id: f64,
    /// Exact KL to the reference after the update.
    pub kl: Vec<f64>,
    /// Penalty coefficient after the controller update.
    pub beta: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CharacterSummary {
    pub character: usize,
    pub h_c: f64,
    pub r_h: f64,
    pub d_targ: f64,
    pub final_kl: f64,
    pub final_beta: f64,
    pub val_task: f64,
    pub val_style: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub config: TrainConfig,
    pub universe_checksum: String,
    pub personas: Vec<usize>,
    pub h_global: f64,
    pub steps: Vec<StepMetrics>,
    pub characters: Vec<CharacterSummary>,
    pub val_task: f64,
    pub val_style: f64,
    pub final_params_checksum: String,
}

impl TrainReport {
    pub fn final_step(&self) -> Option<&StepMetrics> {
        self.steps.last()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdvantageRow {
    pub step: usize,
    pub character: usize,
    pub is_anchor: bool,
    #[serde(flatten)]
    pub record: AdvantageRecord,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KlRow {
    pub step: usize,
    pub character: usize,
    pub h_c: f64,
    pub r_h: f64,
    pub d_targ: f64,
    pub d_kl_observed: f64,
    pub beta: f64,
}

/// Everything a run produces.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub report: TrainReport,
    pub params: PolicyParams,
    pub reference: PolicyParams,
    pub rollouts: Vec<RolloutRecord>,
    pub kl_rows: Vec<KlRow>,
    pub advantage_rows: Vec<AdvantageRow>,
}

/// Identification entropy of every member against `anchor_tokens`, all scored
/// under the group's persona prompt with the current parameters.
pub fn identification_entropies(
    params: &PolicyParams,
    group: &SampleGroup,
    anchor_tokens: &[TokenId],
) -> Result<Vec<f64>> {
    let table = params.log_softmax_table(&group.prompt);
    let v = params.shape.vocab;
    let logp_anchor = sequence_log_prob(&table, v, anchor_tokens);
    group
        .members
        .iter()
        .map(|m| {
            let p_r = identification_ratio(sequence_log_prob(&table, v, &m.tokens), logp_anchor)?;
            Ok(identification_entropy(p_r))
        })
        .collect()
}

/// Advantage pipeline for one scored group.
///
/// CRPO: task normalization, global style normalization, anchor
/// renormalization (when the group has anchors), lambda-combination, gate.
/// GRPO: group normalization of `r_task + r_style`, no gate.
pub fn group_advantages(
    group: &SampleGroup,
    rewards: &[RewardBundle],
    stats: &CharacterStyleStats,
    h_ids: &[f64],
    config: &TrainConfig,
) -> Result<Vec<AdvantageRecord>> {
    if rewards.len() != group.len() || h_ids.len() != group.len() {
        return Err(CrpoError::ShapeMismatch {
            expected: format!("{} rewards and entropies", group.len()),
            found: format!("{} / {}", rewards.len(), h_ids.len()),
        });
    }
    let eps = config.eps;
    let crpo = config.algorithm == Algorithm::Crpo;
    let (a_task, a_style, lambda) = if crpo && config.dual_stream {
        let task = task_advantage(rewards, eps)?;
        let global = style_advantage_global(rewards, stats, group.prompt.character_id, eps)?;
        let style = if group.anchor_count > 0 {
            style_advantage_renorm(&global, eps)?
        } else {
            global
        };
        (task, style, config.lambda)
    } else {
        let total: Vec<f64> = rewards.iter().map(RewardBundle::total).collect();
        let a = grpo_advantage(&total, eps)?;
        (a.clone(), a, 1.0)
    };
    let gamma = if crpo && config.gating {
        config.gate.gamma
    } else {
        0.0
    };
    a_task
        .iter()
        .zip(&a_style)
        .zip(h_ids)
        .map(|((&t, &s), &h)| {
            let a_combined = combine(t, s, lambda);
            Ok(AdvantageRecord {
                a_task: t,
                a_style: s,
                a_combined,
                h_id: h,
                a_gated: gate_advantage(a_combined, h, gamma)?,
            })
        })
        .collect()
}

const PROMPT_STREAM: u64 = 0x50_52_4F_4D;
const ROLLOUT_STREAM: u64 = 0x52_4F_4C_4C;
const PROBE_STREAM: u64 = 0x50_52_4F_42;
const VAL_STREAM: u64 = 0x56_41_4C_49;

fn mean(xs: impl IntoIterator<Item = f64>) -> f64 {
    let (s, n) = xs
        .into_iter()
        .fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

/// Reference entropies and initial controller state for every persona.
pub fn init_kl_states(
    universe: &CharacterUniverse,
    reference: &PolicyParams,
    config: &TrainConfig,
) -> Result<(f64, Vec<CharacterKLState>)> {
    let personas: Vec<usize> = universe.personas().collect();
    let h_c: Vec<f64> = personas
        .iter()
        .map(|&c| character_entropy(reference, &universe.prompts_for(c)))
        .collect::<Result<_>>()?;
    let h_global = mean(h_c.iter().copied());
    let states = personas
        .iter()
        .zip(&h_c)
        .map(|(&c, &h)| {
            let s = CharacterKLState::new(c, h, h_global, &config.gate, config.beta_init)?;
            Ok(if config.kl_relaxation {
                s
            } else {
                s.without_relaxation(&config.gate)
            })
        })
        .collect::<Result<_>>()?;
    Ok((h_global, states))
}

pub fn train(config: &TrainConfig, universe: &CharacterUniverse) -> Result<TrainReport> {
    Ok(train_with(config, universe, Execution::default())?.report)
}

pub fn train_with(
    config: &TrainConfig,
    universe: &CharacterUniverse,
    exec: Execution,
) -> Result<TrainOutcome> {
    let config = config.clone().resolved();
    config.validate()?;
    let seed = config.seed;
    let reference = PolicyParams::pretrained(universe, &config.prior, seed);
    let mut params = reference.clone();
    let personas: Vec<usize> = universe.personas().collect();
    let persona_prompts: Vec<Vec<Prompt>> =
        personas.iter().map(|&c| universe.prompts_for(c)).collect();
    let training_prompts = universe.training_prompts();
    let n_chars = universe.num_characters();

    let (h_global, mut kl_states) = init_kl_states(universe, &reference, &config)?;
    let mut style_stats = vec![CharacterStyleStats::new(config.style_decay)?; n_chars];
    let opts = ObjectiveOptions {
        clip_eps: config.clip_eps,
        train_on_anchor: config.train_on_anchor,
    };

    let mut steps = Vec::with_capacity(config.epochs);
    let mut rollouts = Vec::new();
    let mut kl_rows = Vec::new();
    let mut advantage_rows = Vec::new();

    for step in 0..config.epochs {
        let mut step_fn = || -> Result<StepMetrics> {
            let old = params.clone();
            let mut prompt_rng = stream_rng(seed, &[PROMPT_STREAM, step as u64]);
            let prompts: Vec<Prompt> = (0..config.rollout_batch)
                .map(|_| training_prompts[prompt_rng.gen_range(0..training_prompts.len())])
                .collect();
            let rollout_seed =
                crate::exec::mix64(seed ^ crate::exec::mix64(ROLLOUT_STREAM + step as u64));
            let groups = batch_groups(
                &old,
                &prompts,
                config.group_size,
                config.anchors_per_group,
                config.temperature_train,
                rollout_seed,
                exec,
            )?;
            let rewards: Vec<Vec<RewardBundle>> = exec.map(&groups, |_, g| g.rewards(universe));

            // Per-character non-anchor style rewards; seeds cold statistics.
            let mut batch_style: Vec<Vec<f64>> = vec![Vec::new(); n_chars];
            for (g, r) in groups.iter().zip(&rewards) {
                for (m, rb) in g.members.iter().zip(r) {
                    if !m.is_anchor {
                        batch_style[g.prompt.character_id].push(rb.r_style);
                    }
                }
            }
            let mut seeded = vec![false; n_chars];
            for c in 0..n_chars {
                if !style_stats[c].initialized && !batch_style[c].is_empty() {
                    style_stats[c] = style_stats[c].update(&batch_style[c])?;
                    seeded[c] = true;
                }
            }
            let stats_snapshot = style_stats.clone();

            let records: Vec<Vec<AdvantageRecord>> = exec.try_map(&groups, |gi, g| {
                let probe;
                let anchor_tokens = match g.anchor() {
                    Some(a) => &a.tokens,
                    None => {
                        let mut rng = stream_rng(seed, &[PROBE_STREAM, step as u64, gi as u64]);
                        probe = old.sample_response(
                            &anchor_prompt(&g.prompt)?,
                            config.temperature_train,
                            &mut rng,
                        );
                        &probe.tokens
                    }
                };
                let h_ids = identification_entropies(&old, g, anchor_tokens)?;
                group_advantages(
                    g,
                    &rewards[gi],
                    &stats_snapshot[g.prompt.character_id],
                    &h_ids,
                    &config,
                )
            })?;

            let gated: Vec<Vec<f64>> = records
                .iter()
                .map(|r| r.iter().map(|x| x.a_gated).collect())
                .collect();
            let mut betas = vec![0.0; n_chars];
            for s in &kl_states {
                betas[s.character] = s.beta;
            }
            let grad = objective_gradient(
                &groups, &gated, &params, &old, &reference, &betas, &opts, exec,
            )?;
            params.apply(&grad, config.lr)?;

            for c in 0..n_chars {
                if !seeded[c] && !batch_style[c].is_empty() {
                    style_stats[c] = style_stats[c].update(&batch_style[c])?;
                }
            }

            let kls: Vec<f64> = exec.try_map(&persona_prompts, |_, ps| {
                measure_kl(&params, &reference, ps)
            })?;
            for (state, &d) in kl_states.iter_mut().zip(&kls) {
                if config.kl_control {
                    state.observe(d, &config.gate);
                }
                kl_rows.push(KlRow {
                    step,
                    character: state.character,
                    h_c: state.h_c,
                    r_h: state.r_h,
                    d_targ: state.d_targ,
                    d_kl_observed: d,
                    beta: state.beta,
                });
            }

            let log_now = step + 1 == config.epochs
                || (config.rollout_log_interval > 0 && step % config.rollout_log_interval == 0);
            if log_now {
                rollouts.extend(
                    groups
                        .iter()
                        .zip(&rewards)
                        .map(|(g, r)| RolloutRecord::from_group(step, g, r)),
                );
            }
            if config.dump_advantages {
                for (g, recs) in groups.iter().zip(&records) {
                    for (m, rec) in g.members.iter().zip(recs) {
                        advantage_rows.push(AdvantageRow {
                            step,
                            character: g.prompt.character_id,
                            is_anchor: m.is_anchor,
                            record: *rec,
                        });
                    }
                }
            }

            let on_policy = || {
                groups
                    .iter()
                    .zip(&rewards)
                    .zip(&records)
                    .flat_map(|((g, r), rec)| {
                        g.members
                            .iter()
                            .zip(r)
                            .zip(rec)
                            .filter(|((m, _), _)| !m.is_anchor)
                    })
            };
            let anchor_styles: Vec<f64> = groups
                .iter()
                .zip(&rewards)
                .flat_map(|(g, r)| {
                    g.members
                        .iter()
                        .zip(r)
                        .filter(|(m, _)| m.is_anchor)
                        .map(|(_, rb)| rb.r_style)
                })
                .collect();
            Ok(StepMetrics {
                step,
                mean_task: mean(on_policy().map(|((_, rb), _)| rb.r_task)),
                mean_style: mean(on_policy().map(|((_, rb), _)| rb.r_style)),
                mean_anchor_style: (!anchor_styles.is_empty())
                    .then(|| mean(anchor_styles.iter().copied())),
                mean_h_id: mean(on_policy().map(|(_, rec)| rec.h_id)),
                kl: kls,
                beta: kl_states.iter().map(|s| s.beta).collect(),
            })
        };
        steps.push(step_fn().map_err(|e| e.at_step(step))?);
    }

    // Validation pass at the validation temperature.
    let val: Vec<(f64, f64)> = exec.map(&training_prompts, |i, p| {
        let mut rng = stream_rng(seed, &[VAL_STREAM, i as u64]);
        let dist = params.distribution(p, config.temperature_val);
        let n = config.val_samples.max(1);
        let (mut t, mut s) = (0.0, 0.0);
        for _ in 0..n {
            let y = dist.sample(&mut rng, false);
            t += universe.task_reward(p, &y.tokens);
            s += universe.style_reward(p, &y.tokens);
        }
        (t / n as f64, s / n as f64)
    });
    let characters = kl_states
        .iter()
        .enumerate()
        .map(|(k, s)| {
            let own = training_prompts
                .iter()
                .zip(&val)
                .filter(|(p, _)| p.character_id == s.character);
            let (vt, vs): (Vec<f64>, Vec<f64>) = own.map(|(_, &v)| v).unzip();
            CharacterSummary {
                character: s.character,
                h_c: s.h_c,
                r_h: s.r_h,
                d_targ: s.d_targ,
                final_kl: steps.last().map_or(0.0, |m: &StepMetrics| m.kl[k]),
                final_beta: s.beta,
                val_task: mean(vt),
                val_style: mean(vs),
            }
        })
        .collect();

    let report = TrainReport {
        universe_checksum: universe.checksum(),
        personas,
        h_global,
        steps,
        characters,
        val_task: mean(val.iter().map(|v| v.0)),
        val_style: mean(val.iter().map(|v| v.1)),
        final_params_checksum: params.checksum(),
        config,
    };
    Ok(TrainOutcome {
        report,
        params,
        reference,
        rollouts,
        kl_rows,
        advantage_rows,
    })
}
