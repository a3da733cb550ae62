//! Clipped surrogate with per-character KL penalty, its exact gradient, and
//! the categorical KL measurement used by the controller.
//!
//! Every member of a group, anchors included, is scored under the group's
//! persona prompt. Ratios are sequence level.

use crate::env::Prompt;
use crate::error::{CrpoError, Result};
use crate::exec::Execution;
use crate::policy::{
    log_softmax_into, sequence_log_prob, softmax_into, PolicyParams, SliceGradient,
};
use crate::sampler::SampleGroup;

/// Exponents are clamped to this magnitude before `exp`.
pub const EXP_CLAMP: f64 = 50.0;

/// `exp(logp_new - logp_old)` with the exponent clamped to `±50`.
pub fn importance_ratio(logp_new: f64, logp_old: f64) -> f64 {
    (logp_new - logp_old).clamp(-EXP_CLAMP, EXP_CLAMP).exp()
}

/// `min(rho * a, clip(rho, 1 - eps, 1 + eps) * a)`.
pub fn clipped_term(rho: f64, a: f64, clip_eps: f64) -> f64 {
    (rho * a).min(rho.clamp(1.0 - clip_eps, 1.0 + clip_eps) * a)
}

/// Low-variance KL estimate `r - ln r - 1`, `r = exp(logp_ref - logp_theta)`.
pub fn kl_penalty_estimate(logp_theta: f64, logp_ref: f64) -> f64 {
    let log_r = (logp_ref - logp_theta).clamp(-EXP_CLAMP, EXP_CLAMP);
    (log_r.exp() - log_r - 1.0).max(0.0)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectiveOptions {
    pub clip_eps: f64,
    /// When false, anchors only shape the normalization and receive no update.
    pub train_on_anchor: bool,
}

impl Default for ObjectiveOptions {
    fn default() -> Self {
        Self {
            clip_eps: 0.2,
            train_on_anchor: true,
        }
    }
}

struct MemberTerm {
    value: f64,
    /// d value / d logp_theta
    coeff: f64,
}

fn member_term(
    logp_theta: f64,
    logp_old: f64,
    logp_ref: f64,
    adv: f64,
    beta: f64,
    clip_eps: f64,
) -> MemberTerm {
    let log_rho = logp_theta - logp_old;
    let rho = importance_ratio(logp_theta, logp_old);
    let unclipped = rho * adv;
    let clipped = rho.clamp(1.0 - clip_eps, 1.0 + clip_eps) * adv;
    let surrogate_coeff = if unclipped <= clipped && log_rho.abs() < EXP_CLAMP {
        unclipped
    } else {
        0.0
    };
    let log_r = logp_ref - logp_theta;
    let kl_coeff = if log_r.abs() < EXP_CLAMP {
        1.0 - log_r.exp()
    } else {
        0.0
    };
    MemberTerm {
        value: unclipped.min(clipped) - beta * kl_penalty_estimate(logp_theta, logp_ref),
        coeff: surrogate_coeff - beta * kl_coeff,
    }
}

fn check_inputs(
    groups: &[SampleGroup],
    advantages: &[Vec<f64>],
    params: &PolicyParams,
    others: [&PolicyParams; 2],
) -> Result<()> {
    if groups.len() != advantages.len() {
        return Err(CrpoError::ShapeMismatch {
            expected: format!("{} advantage rows", groups.len()),
            found: advantages.len().to_string(),
        });
    }
    for (g, a) in groups.iter().zip(advantages) {
        if g.len() != a.len() {
            return Err(CrpoError::ShapeMismatch {
                expected: format!("{} advantages", g.len()),
                found: a.len().to_string(),
            });
        }
    }
    for o in others {
        if o.shape != params.shape {
            return Err(CrpoError::ShapeMismatch {
                expected: params.shape.to_string(),
                found: o.shape.to_string(),
            });
        }
    }
    Ok(())
}

struct GroupTables {
    theta: Vec<f64>,
    old: Vec<f64>,
    reference: Vec<f64>,
}

fn tables(
    prompt: &Prompt,
    params: &PolicyParams,
    old: &PolicyParams,
    reference: &PolicyParams,
) -> GroupTables {
    GroupTables {
        theta: params.log_softmax_table(prompt),
        old: old.log_softmax_table(prompt),
        reference: reference.log_softmax_table(prompt),
    }
}

fn group_terms(
    group: &SampleGroup,
    adv: &[f64],
    t: &GroupTables,
    vocab: usize,
    beta: f64,
    opts: &ObjectiveOptions,
) -> Vec<Option<MemberTerm>> {
    group
        .members
        .iter()
        .zip(adv)
        .map(|(m, &a)| {
            if m.is_anchor && !opts.train_on_anchor {
                return None;
            }
            Some(member_term(
                sequence_log_prob(&t.theta, vocab, &m.tokens),
                sequence_log_prob(&t.old, vocab, &m.tokens),
                sequence_log_prob(&t.reference, vocab, &m.tokens),
                a,
                beta,
                opts.clip_eps,
            ))
        })
        .collect()
}

/// `sum_groups (1/G) sum_i [clipped_term(rho_i, A_i) - beta_c * KL_i]`.
///
/// `betas` is indexed by character id.
#[allow(clippy::too_many_arguments)]
pub fn objective_value(
    groups: &[SampleGroup],
    advantages: &[Vec<f64>],
    params: &PolicyParams,
    old: &PolicyParams,
    reference: &PolicyParams,
    betas: &[f64],
    opts: &ObjectiveOptions,
) -> Result<f64> {
    check_inputs(groups, advantages, params, [old, reference])?;
    let vocab = params.shape.vocab;
    Ok(groups
        .iter()
        .zip(advantages)
        .map(|(g, adv)| {
            let t = tables(&g.prompt, params, old, reference);
            let beta = betas[g.prompt.character_id];
            group_terms(g, adv, &t, vocab, beta, opts)
                .into_iter()
                .flatten()
                .map(|m| m.value)
                .sum::<f64>()
                / g.len() as f64
        })
        .sum())
}

/// Per-group gradient slices, in group order.
#[allow(clippy::too_many_arguments)]
pub fn objective_slices(
    groups: &[SampleGroup],
    advantages: &[Vec<f64>],
    params: &PolicyParams,
    old: &PolicyParams,
    reference: &PolicyParams,
    betas: &[f64],
    opts: &ObjectiveOptions,
    exec: Execution,
) -> Result<Vec<SliceGradient>> {
    check_inputs(groups, advantages, params, [old, reference])?;
    let shape = params.shape;
    let (l, v) = (shape.positions, shape.vocab);
    Ok(exec.map(groups, |gi, g| {
        let t = tables(&g.prompt, params, old, reference);
        let beta = betas[g.prompt.character_id];
        let terms = group_terms(g, &advantages[gi], &t, v, beta, opts);
        let inv_g = 1.0 / g.len() as f64;
        let mut grad = SliceGradient::zeros(&shape, g.prompt);
        let mut coeff_sum = 0.0;
        for (m, term) in g.members.iter().zip(&terms) {
            let Some(term) = term else { continue };
            let c = term.coeff * inv_g;
            coeff_sum += c;
            for (pos, &tok) in m.tokens.iter().enumerate() {
                grad.values[pos * v + tok] += c;
            }
        }
        if coeff_sum != 0.0 {
            let mut probs = vec![0.0; v];
            for pos in 0..l {
                softmax_into(params.row(&g.prompt, pos), 1.0, &mut probs);
                for (gv, p) in grad.values[pos * v..(pos + 1) * v].iter_mut().zip(&probs) {
                    *gv -= coeff_sum * p;
                }
            }
        }
        grad
    }))
}

/// Dense gradient of [`objective_value`] with respect to the logits.
///
/// Slices are summed in group order, so the result is identical in both
/// execution modes.
#[allow(clippy::too_many_arguments)]
pub fn objective_gradient(
    groups: &[SampleGroup],
    advantages: &[Vec<f64>],
    params: &PolicyParams,
    old: &PolicyParams,
    reference: &PolicyParams,
    betas: &[f64],
    opts: &ObjectiveOptions,
    exec: Execution,
) -> Result<Vec<f64>> {
    let slices = objective_slices(
        groups, advantages, params, old, reference, betas, opts, exec,
    )?;
    let shape = params.shape;
    let mut dense = vec![0.0; shape.len()];
    for s in &slices {
        let off = shape.slice_offset(&s.prompt);
        for (d, x) in dense[off..off + s.values.len()].iter_mut().zip(&s.values) {
            *d += x;
        }
    }
    Ok(dense)
}

/// Mean over prompts and positions of the exact `KL(pi_theta || pi_ref)`.
pub fn measure_kl(
    params: &PolicyParams,
    reference: &PolicyParams,
    prompts: &[Prompt],
) -> Result<f64> {
    if prompts.is_empty() {
        return Err(CrpoError::Empty {
            what: "character prompt set",
        });
    }
    let v = params.shape.vocab;
    let l = params.shape.positions;
    let mut lp = vec![0.0; v];
    let mut lq = vec![0.0; v];
    let mut p = vec![0.0; v];
    let mut total = 0.0;
    for prompt in prompts {
        for pos in 0..l {
            softmax_into(params.row(prompt, pos), 1.0, &mut p);
            log_softmax_into(params.row(prompt, pos), 1.0, &mut lp);
            log_softmax_into(reference.row(prompt, pos), 1.0, &mut lq);
            total += p
                .iter()
                .zip(lp.iter().zip(&lq))
                .filter(|(&pi, _)| pi > 0.0)
                .map(|(&pi, (&a, &b))| pi * (a - b))
                .sum::<f64>();
        }
    }
    Ok((total / (prompts.len() * l) as f64).max(0.0))
}
