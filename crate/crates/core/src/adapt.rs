//! Entropy-aware adaptive exploitation.
//!
//! Instance level: the identification entropy of a response against its
//! group's anchor scales the advantage by `1 - gamma * H_id`.
//!
//! Model level: each persona gets a KL target proportional to its clamped
//! reference-entropy ratio, and a proportional controller steers its penalty
//! coefficient toward that target.

use serde::{Deserialize, Serialize};

use crate::env::Prompt;
use crate::error::{CrpoError, Result};
use crate::policy::PolicyParams;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GateParams {
    pub gamma: f64,
    pub k_p: f64,
    pub delta_bound: f64,
    pub d_base: f64,
    pub clamp_min: f64,
    pub clamp_max: f64,
}

impl Default for GateParams {
    fn default() -> Self {
        Self {
            gamma: 0.02,
            k_p: 0.1,
            delta_bound: 0.2,
            d_base: 0.1,
            clamp_min: 0.5,
            clamp_max: 2.0,
        }
    }
}

impl GateParams {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("delta_bound", self.delta_bound),
            ("d_base", self.d_base),
            ("clamp_min", self.clamp_min),
            ("clamp_max", self.clamp_max),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(CrpoError::invalid(format!(
                    "gate.{name} must be positive, got {v}"
                )));
            }
        }
        if self.clamp_min > self.clamp_max {
            return Err(CrpoError::invalid(format!(
                "gate.clamp_min {} exceeds gate.clamp_max {}",
                self.clamp_min, self.clamp_max
            )));
        }
        // H_id is at most 1, so gamma <= 1 keeps every gate weight nonnegative.
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(CrpoError::invalid(format!(
                "gate.gamma must lie in [0,1], got {}",
                self.gamma
            )));
        }
        if !(self.k_p.is_finite() && self.k_p * self.delta_bound < 1.0) {
            return Err(CrpoError::invalid(format!(
                "gate.k_p * gate.delta_bound must be < 1 to keep beta positive (k_p = {})",
                self.k_p
            )));
        }
        Ok(())
    }
}

/// `p_r = sigmoid(logp_y - logp_anchor)`.
pub fn identification_ratio(logp_y: f64, logp_anchor: f64) -> Result<f64> {
    if !logp_y.is_finite() || !logp_anchor.is_finite() {
        return Err(CrpoError::NonFinite("identification_ratio"));
    }
    let d = logp_y - logp_anchor;
    Ok(if d >= 0.0 {
        1.0 / (1.0 + (-d).exp())
    } else {
        let e = d.exp();
        e / (1.0 + e)
    })
}

/// Binary entropy in bits, so the result lies in `[0, 1]`.
pub fn identification_entropy(p_r: f64) -> f64 {
    debug_assert!((0.0..=1.0).contains(&p_r));
    let term = |p: f64| if p > 0.0 { p * p.log2() } else { 0.0 };
    (-(term(p_r) + term(1.0 - p_r))).max(0.0)
}

/// `a * (1 - gamma * h_id)`; rejects weights that would flip the sign.
pub fn gate_advantage(a: f64, h_id: f64, gamma: f64) -> Result<f64> {
    if gamma * h_id > 1.0 {
        return Err(CrpoError::GateFlipsSign { gamma, h_id });
    }
    Ok(a * (1.0 - gamma * h_id))
}

/// Mean predictive entropy of the reference policy over one character's prompts.
pub fn character_entropy(reference: &PolicyParams, prompts: &[Prompt]) -> Result<f64> {
    if prompts.is_empty() {
        return Err(CrpoError::Empty {
            what: "character prompt set",
        });
    }
    let total: f64 = prompts
        .iter()
        .map(|p| reference.predictive_entropy(p))
        .sum();
    Ok(total / prompts.len() as f64)
}

pub fn relative_entropy_ratio(h_c: f64, h_global: f64) -> Result<f64> {
    if h_global.is_nan() || h_global <= 0.0 {
        return Err(CrpoError::invalid(format!(
            "global entropy must be positive, got {h_global}"
        )));
    }
    Ok(h_c / h_global)
}

/// `d_base * clamp(r_h, clamp_min, clamp_max)`.
pub fn kl_target(d_base: f64, r_h: f64, clamp_min: f64, clamp_max: f64) -> f64 {
    debug_assert!(clamp_min <= clamp_max);
    d_base * r_h.clamp(clamp_min, clamp_max)
}

/// One proportional step: `beta * (1 + k_p * clip(d_kl / d_targ - 1, ±delta_bound))`.
pub fn pi_update_beta(
    beta: f64,
    d_kl_observed: f64,
    d_targ: f64,
    delta_bound: f64,
    k_p: f64,
) -> f64 {
    debug_assert!(beta > 0.0 && d_targ > 0.0);
    let e = (d_kl_observed / d_targ - 1.0).clamp(-delta_bound, delta_bound);
    beta * (1.0 + k_p * e)
}

/// Model-level adaptation state for one persona.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CharacterKLState {
    pub character: usize,
    pub h_c: f64,
    pub r_h: f64,
    pub d_targ: f64,
    pub beta: f64,
}

impl CharacterKLState {
    pub fn new(
        character: usize,
        h_c: f64,
        h_global: f64,
        gate: &GateParams,
        beta0: f64,
    ) -> Result<Self> {
        if beta0.is_nan() || beta0 <= 0.0 {
            return Err(CrpoError::invalid(format!(
                "initial beta must be positive, got {beta0}"
            )));
        }
        let r_h = relative_entropy_ratio(h_c, h_global)?;
        Ok(Self {
            character,
            h_c,
            r_h,
            d_targ: kl_target(gate.d_base, r_h, gate.clamp_min, gate.clamp_max),
            beta: beta0,
        })
    }

    /// Same state with the entropy-driven relaxation switched off (`d_targ = d_base`).
    pub fn without_relaxation(mut self, gate: &GateParams) -> Self {
        self.d_targ = gate.d_base;
        self
    }

    pub fn observe(&mut self, d_kl_observed: f64, gate: &GateParams) {
        self.beta = pi_update_beta(
            self.beta,
            d_kl_observed,
            self.d_targ,
            gate.delta_bound,
            gate.k_p,
        );
    }
}
