//! Group-relative and dual-stream advantage estimation.
//!
//! The task stream is normalized inside each sampling group. The style stream
//! is normalized against per-character exponential moving averages, then (when
//! the group carries a contrastive anchor) renormalized inside the group so
//! the anchor's low style score lifts every on-style member.

use serde::{Deserialize, Serialize};

use crate::error::{CrpoError, Result};

/// Denominator smoothing used throughout.
pub const DEFAULT_EPS: f64 = 1e-8;

/// Default EMA decay for style statistics.
pub const DEFAULT_STYLE_DECAY: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardBundle {
    pub r_task: f64,
    pub r_style: f64,
}

impl RewardBundle {
    pub fn total(&self) -> f64 {
        self.r_task + self.r_style
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdvantageRecord {
    pub a_task: f64,
    pub a_style: f64,
    pub a_combined: f64,
    pub h_id: f64,
    pub a_gated: f64,
}

/// Population mean and variance.
pub fn mean_var(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var)
}

/// `(R_i - mean) / (std + eps)` with the population standard deviation.
pub fn grpo_advantage(rewards: &[f64], eps: f64) -> Result<Vec<f64>> {
    if rewards.len() < 2 {
        return Err(CrpoError::GroupTooSmall { len: rewards.len() });
    }
    if eps.is_nan() || eps <= 0.0 {
        return Err(CrpoError::invalid(format!(
            "eps must be positive, got {eps}"
        )));
    }
    if rewards.iter().any(|r| !r.is_finite()) {
        return Err(CrpoError::NonFinite("grpo_advantage"));
    }
    let (mean, var) = mean_var(rewards);
    let denom = var.sqrt() + eps;
    Ok(rewards.iter().map(|r| (r - mean) / denom).collect())
}

/// Intra-group normalization of task rewards; anchors count as ordinary members.
pub fn task_advantage(rewards: &[RewardBundle], eps: f64) -> Result<Vec<f64>> {
    let task: Vec<f64> = rewards.iter().map(|r| r.r_task).collect();
    grpo_advantage(&task, eps)
}

/// Per-character running style statistics.
///
/// The variance is tracked; the standard deviation is derived at use.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CharacterStyleStats {
    pub ema_mean: f64,
    pub ema_var: f64,
    pub decay: f64,
    pub initialized: bool,
}

impl CharacterStyleStats {
    pub fn new(decay: f64) -> Result<Self> {
        if !(decay > 0.0 && decay < 1.0) {
            return Err(CrpoError::invalid(format!(
                "EMA decay must lie in (0,1), got {decay}"
            )));
        }
        Ok(Self {
            ema_mean: 0.0,
            ema_var: 0.0,
            decay,
            initialized: false,
        })
    }

    pub fn ema_std(&self) -> f64 {
        self.ema_var.max(0.0).sqrt()
    }

    /// Folds one batch of (non-anchor) style rewards into the averages.
    ///
    /// The first batch seeds the statistics directly.
    pub fn update(&self, batch: &[f64]) -> Result<Self> {
        if batch.is_empty() {
            return Err(CrpoError::Empty {
                what: "style reward batch",
            });
        }
        let (mean, var) = mean_var(batch);
        if !self.initialized {
            return Ok(Self {
                ema_mean: mean,
                ema_var: var,
                initialized: true,
                ..*self
            });
        }
        let a = self.decay;
        Ok(Self {
            ema_mean: (1.0 - a) * self.ema_mean + a * mean,
            ema_var: (1.0 - a) * self.ema_var + a * var,
            ..*self
        })
    }
}

/// `(r_style - ema_mean) / (ema_std + eps)`, using only historical statistics.
pub fn style_advantage_global(
    rewards: &[RewardBundle],
    stats: &CharacterStyleStats,
    character: usize,
    eps: f64,
) -> Result<Vec<f64>> {
    if !stats.initialized {
        return Err(CrpoError::StatsUninitialized { character });
    }
    let denom = stats.ema_std() + eps;
    Ok(rewards
        .iter()
        .map(|r| (r.r_style - stats.ema_mean) / denom)
        .collect())
}

/// Intra-group renormalization of globally normalized style advantages.
pub fn style_advantage_renorm(global: &[f64], eps: f64) -> Result<Vec<f64>> {
    grpo_advantage(global, eps)
}

/// `lambda * a_task + (1 - lambda) * a_style`.
pub fn combine(a_task: f64, a_style: f64, lambda: f64) -> f64 {
    debug_assert!((0.0..=1.0).contains(&lambda), "lambda in [0,1]");
    lambda * a_task + (1.0 - lambda) * a_style
}
