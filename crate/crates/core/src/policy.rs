//! Character-conditioned tabular softmax sequence policy.
//!
//! Every `(character, query, position)` cell holds an independent row of `V`
//! logits. A response is `L` tokens drawn position by position, so sequence
//! log-probabilities, their gradients and entropies are all exact.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::env::{CharacterUniverse, Prompt, TokenId, GENERIC_CHARACTER};
use crate::error::{CrpoError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PolicyShape {
    pub characters: usize,
    pub queries: usize,
    pub positions: usize,
    pub vocab: usize,
}

impl PolicyShape {
    pub fn of(universe: &CharacterUniverse) -> Self {
        Self {
            characters: universe.num_characters(),
            queries: universe.num_queries(),
            positions: universe.response_len,
            vocab: universe.vocab_size,
        }
    }

    pub fn len(&self) -> usize {
        self.characters * self.queries * self.positions * self.vocab
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Entries in one `(character, query)` slice.
    pub fn slice_len(&self) -> usize {
        self.positions * self.vocab
    }

    pub fn slice_offset(&self, prompt: &Prompt) -> usize {
        (prompt.character_id * self.queries + prompt.query_id) * self.slice_len()
    }
}

impl std::fmt::Display for PolicyShape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{}x{}x{}x{}",
            self.characters, self.queries, self.positions, self.vocab
        )
    }
}

/// How the reference ("pretrained") policy is initialized.
///
/// Logits are `field / difficulty + noise + knowledge` where `field` is a
/// Gaussian preference field shared by every character for a given query,
/// `noise` is per-character, and `knowledge` is a bias on the tokens the
/// rewards look for. Harder personas get a flatter prior and hence a higher
/// reference entropy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PriorConfig {
    pub generic_scale: f64,
    pub character_noise: f64,
    pub knowledge_bias: f64,
    pub answer_bias: f64,
    pub style_bias: f64,
}

impl Default for PriorConfig {
    fn default() -> Self {
        Self {
            generic_scale: 2.0,
            character_noise: 0.3,
            knowledge_bias: 1.0,
            answer_bias: 0.2,
            style_bias: 1.0,
        }
    }
}

/// Logits indexed `[character][query][position][token]`, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyParams {
    pub shape: PolicyShape,
    pub logits: Vec<f64>,
}

/// Gradient restricted to one prompt's `(character, query)` slice.
#[derive(Debug, Clone, PartialEq)]
pub struct SliceGradient {
    pub prompt: Prompt,
    /// `positions * vocab` entries, position-major.
    pub values: Vec<f64>,
}

impl SliceGradient {
    pub fn zeros(shape: &PolicyShape, prompt: Prompt) -> Self {
        Self {
            prompt,
            values: vec![0.0; shape.slice_len()],
        }
    }

    pub fn scale(&mut self, k: f64) {
        self.values.iter_mut().for_each(|v| *v *= k);
    }

    pub fn add_scaled(&mut self, other: &SliceGradient, k: f64) {
        debug_assert_eq!(self.prompt.character_id, other.prompt.character_id);
        debug_assert_eq!(self.prompt.query_id, other.prompt.query_id);
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += k * b;
        }
    }

    pub fn to_dense(&self, shape: &PolicyShape) -> Vec<f64> {
        let mut out = vec![0.0; shape.len()];
        let off = shape.slice_offset(&self.prompt);
        out[off..off + self.values.len()].copy_from_slice(&self.values);
        out
    }
}

pub(crate) fn softmax_into(logits: &[f64], temperature: f64, out: &mut [f64]) {
    let max = logits
        .iter()
        .fold(f64::NEG_INFINITY, |m, &x| m.max(x / temperature));
    let mut sum = 0.0;
    for (o, &x) in out.iter_mut().zip(logits) {
        *o = (x / temperature - max).exp();
        sum += *o;
    }
    out.iter_mut().for_each(|o| *o /= sum);
}

pub(crate) fn log_softmax_into(logits: &[f64], temperature: f64, out: &mut [f64]) {
    let max = logits
        .iter()
        .fold(f64::NEG_INFINITY, |m, &x| m.max(x / temperature));
    let lse = logits
        .iter()
        .map(|&x| (x / temperature - max).exp())
        .sum::<f64>()
        .ln()
        + max;
    for (o, &x) in out.iter_mut().zip(logits) {
        *o = x / temperature - lse;
    }
}

/// Shannon entropy in nats with `0 ln 0 = 0`.
pub fn shannon_entropy(probs: &[f64]) -> f64 {
    -probs
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| p * p.ln())
        .sum::<f64>()
}

fn gaussian(rng: &mut impl Rng) -> f64 {
    // Box-Muller; avoids u1 = 0.
    let u1: f64 = 1.0 - rng.gen::<f64>();
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// One sampled response.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectorySample {
    pub prompt: Prompt,
    pub tokens: Vec<TokenId>,
    /// Per-token log-probabilities under the sampling policy and prompt.
    pub logp_old: Vec<f64>,
    pub is_anchor: bool,
}

impl TrajectorySample {
    pub fn sequence_logp_old(&self) -> f64 {
        self.logp_old.iter().sum()
    }
}

/// Per-position sampling tables for one prompt; reused across the members of a group.
#[derive(Debug, Clone)]
pub struct PromptDistribution {
    pub prompt: Prompt,
    probs: Vec<f64>,
    log_probs: Vec<f64>,
    vocab: usize,
}

impl PromptDistribution {
    pub fn probs(&self, position: usize) -> &[f64] {
        &self.probs[position * self.vocab..(position + 1) * self.vocab]
    }

    pub fn sample(&self, rng: &mut impl Rng, is_anchor: bool) -> TrajectorySample {
        let positions = self.probs.len() / self.vocab;
        let mut tokens = Vec::with_capacity(positions);
        let mut logp_old = Vec::with_capacity(positions);
        for pos in 0..positions {
            let probs = self.probs(pos);
            let u: f64 = rng.gen();
            let mut acc = 0.0;
            let mut token = self.vocab - 1;
            for (t, &p) in probs.iter().enumerate() {
                acc += p;
                if u < acc {
                    token = t;
                    break;
                }
            }
            // rounding can leave the tail with zero mass; fall back to the last positive entry
            while probs[token] == 0.0 && token > 0 {
                token -= 1;
            }
            tokens.push(token);
            logp_old.push(self.log_probs[pos * self.vocab + token]);
        }
        TrajectorySample {
            prompt: self.prompt,
            tokens,
            logp_old,
            is_anchor,
        }
    }
}

impl PolicyParams {
    pub fn zeros(shape: PolicyShape) -> Self {
        Self {
            shape,
            logits: vec![0.0; shape.len()],
        }
    }

    pub fn from_logits(shape: PolicyShape, logits: Vec<f64>) -> Result<Self> {
        if logits.len() != shape.len() {
            return Err(CrpoError::ShapeMismatch {
                expected: format!("{} logits for shape {shape}", shape.len()),
                found: logits.len().to_string(),
            });
        }
        if logits.iter().any(|x| !x.is_finite()) {
            return Err(CrpoError::NonFinite("policy logits"));
        }
        Ok(Self { shape, logits })
    }

    /// Reference initialization; see [`PriorConfig`].
    pub fn pretrained(universe: &CharacterUniverse, prior: &PriorConfig, seed: u64) -> Self {
        let shape = PolicyShape::of(universe);
        let mut params = Self::zeros(shape);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x005E_ED0F_9E1A);
        let (l, v) = (shape.positions, shape.vocab);
        for q in 0..shape.queries {
            let field: Vec<f64> = (0..l * v)
                .map(|_| prior.generic_scale * gaussian(&mut rng))
                .collect();
            let query = &universe.queries[q];
            for c in 0..shape.characters {
                let profile = &universe.characters[c];
                let off = shape.slice_offset(&Prompt::new(c, q));
                let slice = &mut params.logits[off..off + l * v];
                for (x, f) in slice.iter_mut().zip(&field) {
                    *x = f / profile.difficulty + prior.character_noise * gaussian(&mut rng);
                }
                if c == GENERIC_CHARACTER {
                    continue;
                }
                for pos in 1..l {
                    slice[pos * v + query.answer_token] += prior.answer_bias;
                }
                slice[query.focus_token_by_character[c]] += prior.knowledge_bias;
                for pos in 1..l {
                    for &m in &profile.style_markers {
                        slice[pos * v + m] += prior.style_bias / profile.style_markers.len() as f64;
                    }
                }
            }
        }
        params
    }

    pub fn slice(&self, prompt: &Prompt) -> &[f64] {
        let off = self.shape.slice_offset(prompt);
        &self.logits[off..off + self.shape.slice_len()]
    }

    pub fn row(&self, prompt: &Prompt, position: usize) -> &[f64] {
        let v = self.shape.vocab;
        &self.slice(prompt)[position * v..(position + 1) * v]
    }

    pub fn position_distribution(
        &self,
        prompt: &Prompt,
        position: usize,
        temperature: f64,
    ) -> Vec<f64> {
        assert!(temperature > 0.0, "temperature must be positive");
        let mut out = vec![0.0; self.shape.vocab];
        softmax_into(self.row(prompt, position), temperature, &mut out);
        out
    }

    pub fn distribution(&self, prompt: &Prompt, temperature: f64) -> PromptDistribution {
        assert!(temperature > 0.0, "temperature must be positive");
        let (l, v) = (self.shape.positions, self.shape.vocab);
        let mut probs = vec![0.0; l * v];
        let mut log_probs = vec![0.0; l * v];
        for pos in 0..l {
            let row = self.row(prompt, pos);
            softmax_into(row, temperature, &mut probs[pos * v..(pos + 1) * v]);
            log_softmax_into(row, temperature, &mut log_probs[pos * v..(pos + 1) * v]);
        }
        PromptDistribution {
            prompt: *prompt,
            probs,
            log_probs,
            vocab: v,
        }
    }

    pub fn sample_response(
        &self,
        prompt: &Prompt,
        temperature: f64,
        rng: &mut impl Rng,
    ) -> TrajectorySample {
        self.distribution(prompt, temperature)
            .sample(rng, prompt.is_anchor_prompt)
    }

    /// Per-position log-softmax table at temperature 1, `positions * vocab` entries.
    pub fn log_softmax_table(&self, prompt: &Prompt) -> Vec<f64> {
        let v = self.shape.vocab;
        let mut out = vec![0.0; self.shape.slice_len()];
        for (pos, chunk) in out.chunks_mut(v).enumerate() {
            log_softmax_into(self.row(prompt, pos), 1.0, chunk);
        }
        out
    }

    pub fn log_prob(&self, prompt: &Prompt, tokens: &[TokenId]) -> f64 {
        debug_assert_eq!(tokens.len(), self.shape.positions);
        let table = self.log_softmax_table(prompt);
        sequence_log_prob(&table, self.shape.vocab, tokens)
    }

    /// `d log_prob / d logits`: `one_hot(token) - softmax(row)` at every position.
    pub fn log_prob_grad(&self, prompt: &Prompt, tokens: &[TokenId]) -> SliceGradient {
        debug_assert_eq!(tokens.len(), self.shape.positions);
        let v = self.shape.vocab;
        let mut grad = SliceGradient::zeros(&self.shape, *prompt);
        for (pos, chunk) in grad.values.chunks_mut(v).enumerate() {
            softmax_into(self.row(prompt, pos), 1.0, chunk);
            chunk.iter_mut().for_each(|g| *g = -*g);
            chunk[tokens[pos]] += 1.0;
        }
        grad
    }

    /// Mean over positions of the temperature-1 Shannon entropy (nats).
    pub fn predictive_entropy(&self, prompt: &Prompt) -> f64 {
        let mut probs = vec![0.0; self.shape.vocab];
        let total: f64 = (0..self.shape.positions)
            .map(|pos| {
                softmax_into(self.row(prompt, pos), 1.0, &mut probs);
                shannon_entropy(&probs)
            })
            .sum();
        total / self.shape.positions as f64
    }

    /// Adds `k * grad` to the parameters (gradient ascent when `k > 0`).
    pub fn apply(&mut self, grad: &[f64], k: f64) -> Result<()> {
        if grad.len() != self.logits.len() {
            return Err(CrpoError::ShapeMismatch {
                expected: self.logits.len().to_string(),
                found: grad.len().to_string(),
            });
        }
        for (x, g) in self.logits.iter_mut().zip(grad) {
            *x += k * g;
        }
        Ok(())
    }

    /// Hex SHA-256 over the little-endian bit patterns of the logits.
    pub fn checksum(&self) -> String {
        let bytes: Vec<u8> = self.logits.iter().flat_map(|x| x.to_le_bytes()).collect();
        crate::env::hex_digest(&bytes)
    }

    /// JSON checkpoint: `{"shape": {...}, "logits": [...]}`.
    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_vec(self)?)?;
        Ok(())
    }

    pub fn load_checkpoint(path: &Path) -> Result<Self> {
        let raw: PolicyParams = serde_json::from_slice(&std::fs::read(path)?)?;
        Self::from_logits(raw.shape, raw.logits)
    }
}

/// Sums `table[pos][token]` over positions.
pub(crate) fn sequence_log_prob(table: &[f64], vocab: usize, tokens: &[TokenId]) -> f64 {
    tokens
        .iter()
        .enumerate()
        .map(|(pos, &t)| table[pos * vocab + t])
        .sum()
}
