use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use crpo_core::env::UniverseParams;
use crpo_core::trainer::{Algorithm, TrainConfig};
use serde::{Deserialize, Serialize};

/// One experiment: a universe, a training config and the seeds to run it on.
///
/// Every key is optional in the file; missing keys take their defaults and
/// the fully resolved config is echoed next to the outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub out_dir: PathBuf,
    pub seeds: Vec<u64>,
    pub universe: UniverseParams,
    pub train: TrainConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            out_dir: PathBuf::from("runs"),
            seeds: vec![1, 2, 3, 4, 5],
            universe: UniverseParams::default(),
            train: TrainConfig::default(),
        }
    }
}

/// Command-line overrides shared by `run` and `ablate`.
#[derive(Debug, Clone, Default, clap::Args)]
pub struct Overrides {
    /// Run a single seed instead of the config's seed list.
    #[arg(long, env = "CRPO_LAB_SEED")]
    pub seed: Option<u64>,
    /// crpo or grpo.
    #[arg(long)]
    pub algorithm: Option<Algorithm>,
    /// Anchors per sample group.
    #[arg(long)]
    pub anchors: Option<usize>,
    /// Task/style balance.
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Identification-entropy gate coefficient.
    #[arg(long)]
    pub gamma: Option<f64>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("invalid config {}", path.display()))
    }

    pub fn parse(text: &str) -> Result<Self> {
        Ok(toml::from_str(text)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string_pretty(self)?)
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(seed) = o.seed {
            self.seeds = vec![seed];
        }
        if let Some(a) = o.algorithm {
            self.train.algorithm = a;
        }
        if let Some(n) = o.anchors {
            self.train.anchors_per_group = n;
        }
        if let Some(l) = o.lambda {
            self.train.lambda = l;
        }
        if let Some(g) = o.gamma {
            self.train.gate.gamma = g;
        }
        if let Some(out) = &o.out {
            self.out_dir = out.clone();
        }
    }

    /// Config with the baseline's forced settings applied, as it will run.
    pub fn resolved(&self) -> Self {
        Self {
            train: self.train.clone().resolved(),
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            bail!("seeds: list is empty");
        }
        let mut seen = self.seeds.clone();
        seen.sort_unstable();
        seen.dedup();
        if seen.len() != self.seeds.len() {
            bail!("seeds: duplicate entries in {:?}", self.seeds);
        }
        self.train.validate().context("train")?;
        crpo_core::env::CharacterUniverse::build(&self.universe).context("universe")?;
        Ok(())
    }
}

pub fn seed_dir(out: &Path, seed: u64) -> PathBuf {
    out.join(format!("seed-{seed}"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips() {
        let c = ExperimentConfig::default();
        assert_eq!(ExperimentConfig::parse(&c.to_toml().unwrap()).unwrap(), c);
    }

    #[test]
    fn partial_file_takes_defaults() {
        let c = ExperimentConfig::parse("seeds = [3]\n[train]\nlambda = 0.7\n").unwrap();
        assert_eq!(c.seeds, vec![3]);
        assert_eq!(c.train.lambda, 0.7);
        assert_eq!(c.train.group_size, TrainConfig::default().group_size);
        assert_eq!(c.universe, UniverseParams::default());
    }

    #[test]
    fn unknown_key_is_named() {
        let err = ExperimentConfig::parse("[train]\nlamda = 0.7\n").unwrap_err();
        assert!(format!("{err:#}").contains("lamda"), "{err:#}");
    }

    #[test]
    fn overrides_apply() {
        let mut c = ExperimentConfig::default();
        c.apply(&Overrides {
            seed: Some(9),
            algorithm: Some(Algorithm::Grpo),
            anchors: Some(2),
            lambda: Some(0.3),
            gamma: Some(0.5),
            out: Some("x".into()),
        });
        assert_eq!(c.seeds, vec![9]);
        assert_eq!(c.train.algorithm, Algorithm::Grpo);
        assert_eq!(c.train.anchors_per_group, 2);
        assert_eq!(c.train.lambda, 0.3);
        assert_eq!(c.train.gate.gamma, 0.5);
        assert_eq!(c.out_dir, PathBuf::from("x"));
        assert_eq!(c.resolved().train.anchors_per_group, 0);
    }
}
