//! Character-centric group relative policy optimization on a synthetic
//! role-playing testbed.
//!
//! A tabular softmax policy answers persona-conditioned queries with short
//! token sequences. Two verifiable rewards score each response: a task reward
//! (focus token plus answer token) and a style reward (overlap with the
//! persona's marker tokens). Training compares vanilla GRPO against CRPO,
//! which adds dual-stream advantages, entropy-aware gating with per-character
//! KL control, and contrastive anchor responses sampled without the persona.
//!
//! Module map:
//!
//! - [`env`]: universe, prompts, rewards
//! - [`policy`]: sampling, log-probabilities, gradients, entropy
//! - [`advantage`]: group and dual-stream advantages, EMA style statistics
//! - [`adapt`]: identification-entropy gate, KL targets, beta controller
//! - [`sampler`]: mixed groups and the rollout log
//! - [`objective`]: clipped surrogate, KL penalty, exact gradient
//! - [`trainer`]: the training loop and its report
//! - [`report`]: CSV/JSON output

pub mod adapt;
pub mod advantage;
pub mod env;
mod error;
pub mod exec;
pub mod objective;
pub mod policy;
pub mod report;
pub mod sampler;
pub mod trainer;

pub use error::{CrpoError, Result};
pub use exec::Execution;
