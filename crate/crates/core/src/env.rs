//! Synthetic character universe: personas, queries, anchor prompts and the
//! two verifiable rewards.
//!
//! Vocabulary layout for `V` tokens:
//!
//! ```text
//! [0, V/4)      answer tokens
//! [V/4, V/2)    focus tokens
//! [V/2, V)      style-marker pool
//! ```
//!
//! Character 0 is the generic persona. It owns no style markers and is the
//! persona every anchor prompt is rewritten to.

use std::collections::BTreeSet;
use std::path::Path;

use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CrpoError, Result};

pub type CharacterId = usize;
pub type QueryId = usize;
pub type TokenId = usize;

/// The persona used for anchor prompts.
pub const GENERIC_CHARACTER: CharacterId = 0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CharacterProfile {
    pub id: CharacterId,
    pub style_markers: BTreeSet<TokenId>,
    /// Breadth of the marker set relative to the smallest persona set.
    pub difficulty: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Query {
    pub id: QueryId,
    pub answer_token: TokenId,
    /// Indexed by character id.
    pub focus_token_by_character: Vec<TokenId>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Prompt {
    pub character_id: CharacterId,
    pub query_id: QueryId,
    pub is_anchor_prompt: bool,
}

impl Prompt {
    pub fn new(character_id: CharacterId, query_id: QueryId) -> Self {
        Self {
            character_id,
            query_id,
            is_anchor_prompt: false,
        }
    }
}

/// Strips the persona from a prompt, keeping only the query context.
pub fn anchor_prompt(p: &Prompt) -> Result<Prompt> {
    if p.is_anchor_prompt {
        return Err(CrpoError::invalid("prompt is already an anchor prompt"));
    }
    Ok(Prompt {
        character_id: GENERIC_CHARACTER,
        query_id: p.query_id,
        is_anchor_prompt: true,
    })
}

/// Construction parameters for [`CharacterUniverse::build`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct UniverseParams {
    pub seed: u64,
    pub num_characters: usize,
    pub vocab_size: usize,
    pub markers_per_char: (usize, usize),
    pub num_queries: usize,
    pub response_len: usize,
}

impl Default for UniverseParams {
    fn default() -> Self {
        Self {
            seed: 1,
            num_characters: 4,
            vocab_size: 64,
            markers_per_char: (2, 8),
            num_queries: 10,
            response_len: 6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CharacterUniverse {
    pub characters: Vec<CharacterProfile>,
    pub queries: Vec<Query>,
    pub vocab_size: usize,
    pub response_len: usize,
    pub rng_seed: u64,
}

impl CharacterUniverse {
    pub fn build(params: &UniverseParams) -> Result<Self> {
        let &UniverseParams {
            seed,
            num_characters,
            vocab_size,
            markers_per_char: (min_markers, max_markers),
            num_queries,
            response_len,
        } = params;

        if num_characters < 2 {
            return Err(CrpoError::invalid(
                "need at least 2 characters (generic + one persona)",
            ));
        }
        if response_len < 2 {
            return Err(CrpoError::invalid("response_len must be at least 2"));
        }
        if num_queries == 0 {
            return Err(CrpoError::Empty { what: "query set" });
        }
        if min_markers == 0 || min_markers > max_markers {
            return Err(CrpoError::invalid(format!(
                "markers_per_char range ({min_markers}, {max_markers}) must satisfy 1 <= min <= max"
            )));
        }
        let required = (4 * max_markers).max(4);
        if vocab_size < required {
            return Err(CrpoError::VocabularyTooSmall {
                vocab_size,
                required,
            });
        }

        let answer_range = 0..vocab_size / 4;
        let focus_range = vocab_size / 4..vocab_size / 2;
        let marker_base = vocab_size / 2;
        let marker_pool = vocab_size - marker_base;

        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let personas = num_characters - 1;
        let mut characters = Vec::with_capacity(num_characters);
        characters.push(CharacterProfile {
            id: GENERIC_CHARACTER,
            style_markers: BTreeSet::new(),
            difficulty: 1.0,
        });
        for i in 0..personas {
            // Spread sizes linearly over the range so difficulty is heterogeneous.
            let size = if personas == 1 {
                (min_markers + max_markers) / 2
            } else {
                let span = (max_markers - min_markers) as f64;
                min_markers + (span * i as f64 / (personas - 1) as f64).round() as usize
            };
            let style_markers = sample_indices(&mut rng, marker_pool, size)
                .into_iter()
                .map(|t| marker_base + t)
                .collect();
            characters.push(CharacterProfile {
                id: i + 1,
                style_markers,
                difficulty: size as f64 / min_markers as f64,
            });
        }

        let queries = (0..num_queries)
            .map(|id| Query {
                id,
                answer_token: rng.gen_range(answer_range.clone()),
                focus_token_by_character: (0..num_characters)
                    .map(|_| rng.gen_range(focus_range.clone()))
                    .collect(),
            })
            .collect();

        Ok(Self {
            characters,
            queries,
            vocab_size,
            response_len,
            rng_seed: seed,
        })
    }

    pub fn num_characters(&self) -> usize {
        self.characters.len()
    }

    pub fn num_queries(&self) -> usize {
        self.queries.len()
    }

    /// Persona ids (every character except the generic one).
    pub fn personas(&self) -> impl Iterator<Item = CharacterId> + '_ {
        self.characters
            .iter()
            .map(|c| c.id)
            .filter(|&id| id != GENERIC_CHARACTER)
    }

    /// All non-anchor prompts for one character.
    pub fn prompts_for(&self, character: CharacterId) -> Vec<Prompt> {
        (0..self.num_queries())
            .map(|q| Prompt::new(character, q))
            .collect()
    }

    /// Every persona prompt, character-major.
    pub fn training_prompts(&self) -> Vec<Prompt> {
        self.personas().flat_map(|c| self.prompts_for(c)).collect()
    }

    fn check_tokens(&self, tokens: &[TokenId]) {
        debug_assert_eq!(tokens.len(), self.response_len, "response length");
    }

    /// Focus correctness at position 0 plus answer presence in positions 1..L.
    ///
    /// `prompt` is the prompt the response is scored for; anchors are scored
    /// against the persona they were injected for.
    pub fn task_reward(&self, prompt: &Prompt, tokens: &[TokenId]) -> f64 {
        self.check_tokens(tokens);
        let query = &self.queries[prompt.query_id];
        let focus = query.focus_token_by_character[prompt.character_id];
        let mut reward = 0.0;
        if tokens.first() == Some(&focus) {
            reward += 0.5;
        }
        if tokens.iter().skip(1).any(|&t| t == query.answer_token) {
            reward += 0.5;
        }
        reward
    }

    /// Jaccard overlap between the response token set and the persona's markers.
    pub fn style_reward(&self, prompt: &Prompt, tokens: &[TokenId]) -> f64 {
        self.check_tokens(tokens);
        let markers = &self.characters[prompt.character_id].style_markers;
        let set: BTreeSet<TokenId> = tokens.iter().copied().collect();
        let inter = set.intersection(markers).count();
        let union = set.union(markers).count();
        if union == 0 {
            0.0
        } else {
            inter as f64 / union as f64
        }
    }

    /// Hex SHA-256 of the canonical JSON encoding.
    pub fn checksum(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("universe serializes");
        hex_digest(&bytes)
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }
}

pub(crate) fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn example() -> CharacterUniverse {
        CharacterUniverse::build(&UniverseParams {
            seed: 1,
            num_characters: 4,
            vocab_size: 64,
            markers_per_char: (2, 8),
            num_queries: 10,
            response_len: 6,
        })
        .unwrap()
    }

    #[test]
    fn build_respects_contract() {
        let u = example();
        assert_eq!(u.num_characters(), 4);
        assert_eq!(u.num_queries(), 10);
        assert!(u.characters[0].style_markers.is_empty());
        let sizes: Vec<usize> = u.characters[1..]
            .iter()
            .map(|c| c.style_markers.len())
            .collect();
        assert_eq!(sizes, vec![2, 5, 8]);
        for c in &u.characters[1..] {
            assert!(c.difficulty > 0.0);
            assert!(c.style_markers.iter().all(|&t| (32..64).contains(&t)));
        }
        for q in &u.queries {
            assert!(q.answer_token < 16);
            assert_eq!(q.focus_token_by_character.len(), 4);
            assert!(q
                .focus_token_by_character
                .iter()
                .all(|&t| (16..32).contains(&t)));
        }
    }

    #[test]
    fn build_is_deterministic() {
        let a = serde_json::to_vec(&example()).unwrap();
        let b = serde_json::to_vec(&example()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn rejects_small_vocabulary() {
        let err = CharacterUniverse::build(&UniverseParams {
            seed: 1,
            num_characters: 2,
            vocab_size: 4,
            markers_per_char: (8, 8),
            num_queries: 10,
            response_len: 6,
        })
        .unwrap_err();
        assert!(err.to_string().contains("vocabulary too small"), "{err}");
    }

    #[test]
    fn rejects_bad_shapes() {
        for p in [
            UniverseParams {
                num_characters: 1,
                ..Default::default()
            },
            UniverseParams {
                response_len: 1,
                ..Default::default()
            },
        ] {
            assert!(CharacterUniverse::build(&p).is_err());
        }
    }

    #[test]
    fn anchor_prompt_strips_persona() {
        let a = anchor_prompt(&Prompt::new(3, 7)).unwrap();
        assert_eq!(
            a,
            Prompt {
                character_id: 0,
                query_id: 7,
                is_anchor_prompt: true
            }
        );
        let b = anchor_prompt(&Prompt::new(1, 0)).unwrap();
        assert_eq!(
            (b.character_id, b.query_id, b.is_anchor_prompt),
            (0, 0, true)
        );
        assert!(anchor_prompt(&a).is_err());
    }

    #[test]
    fn task_reward_cases() {
        let u = example();
        let p = Prompt::new(2, 3);
        let q = &u.queries[3];
        let focus = q.focus_token_by_character[2];
        let answer = q.answer_token;
        let filler = 63; // outside the answer and focus ranges
        assert_eq!(
            u.task_reward(&p, &[focus, answer, filler, filler, filler, filler]),
            1.0
        );
        let wrong = if focus == 16 { 17 } else { 16 };
        assert_eq!(
            u.task_reward(&p, &[wrong, answer, filler, filler, filler, filler]),
            0.5
        );
        assert_eq!(
            u.task_reward(&p, &[wrong, filler, filler, filler, filler, filler]),
            0.0
        );
        // answer at position 0 does not count
        assert_eq!(
            u.task_reward(&p, &[answer, filler, filler, filler, filler, filler]),
            0.0
        );
    }

    #[test]
    fn style_reward_is_set_jaccard() {
        let mut u = example();
        u.characters[1].style_markers = [40, 41, 42].into_iter().collect();
        let p = Prompt::new(1, 0);
        // {40,41,5} vs {40,41,42}: 2 / 4
        assert_eq!(u.style_reward(&p, &[40, 41, 5, 5, 40, 41]), 0.5);
        assert_eq!(u.style_reward(&p, &[40, 41, 42, 40, 41, 42]), 1.0);
        assert_eq!(u.style_reward(&p, &[1, 2, 3, 4, 5, 6]), 0.0);
        // generic persona has no markers
        assert_eq!(
            u.style_reward(&Prompt::new(0, 0), &[40, 41, 42, 40, 41, 42]),
            0.0
        );
    }

    #[test]
    fn random_responses_score_below_pure_marker_responses() {
        let u = example();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for c in u.personas() {
            let p = Prompt::new(c, 0);
            let markers: Vec<_> = u.characters[c].style_markers.iter().copied().collect();
            let pure: Vec<_> = (0..u.response_len)
                .map(|i| markers[i % markers.len()])
                .collect();
            let best = u.style_reward(&p, &pure);
            let n = 20_000;
            let mean: f64 = (0..n)
                .map(|_| {
                    let toks: Vec<_> = (0..u.response_len)
                        .map(|_| rng.gen_range(0..u.vocab_size))
                        .collect();
                    u.style_reward(&p, &toks)
                })
                .sum::<f64>()
                / n as f64;
            assert!(mean < best, "character {c}: {mean} vs {best}");
        }
    }

    #[test]
    fn json_round_trip_preserves_checksum() {
        let u = example();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("u.json");
        u.save_json(&path).unwrap();
        let back = CharacterUniverse::load_json(&path).unwrap();
        assert_eq!(back, u);
        assert_eq!(back.checksum(), u.checksum());
    }
}
