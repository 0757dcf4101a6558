use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use vulnmil::corpus::SyntheticSpec;
use vulnmil::metrics::DEFAULT_THRESHOLD;
use vulnmil::model::ModelConfig;
use vulnmil::pipeline::ExperimentConfig;
use vulnmil::segmenter::DEFAULT_VOCAB_SIZE;
use vulnmil::trainer::TrainConfig;

/// Settings read from `--config`. Every table and key is optional.
///
/// ```toml
/// vocab_size = 512
/// threshold = 0.5
/// [model.encoder]
/// layers = 2
/// [train]
/// k = 3
/// [corpus]
/// train = 200
/// ```
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub vocab_size: usize,
    pub threshold: f64,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub corpus: SyntheticSpec,
    #[serde(skip)]
    pub max_len_override: Option<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            vocab_size: DEFAULT_VOCAB_SIZE,
            threshold: DEFAULT_THRESHOLD,
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            corpus: SyntheticSpec::default(),
            max_len_override: None,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("cannot read config {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("invalid config {}", path.display()))
    }

    /// Flags win over file values. `seed` drives both corpus generation and
    /// training.
    pub fn apply_overrides(
        &mut self,
        seed: Option<u64>,
        k: Option<usize>,
        max_len: Option<usize>,
        threshold: Option<f64>,
    ) -> Result<()> {
        if let Some(s) = seed {
            self.corpus.seed = s;
            self.train.seed = s;
        }
        if let Some(k) = k {
            if k == 0 {
                bail!("--k must be at least 1");
            }
            self.train.k = k;
        }
        if let Some(len) = max_len {
            if len == 0 {
                bail!("--max-len must be at least 1");
            }
            self.model.encoder.max_len = len;
            self.max_len_override = Some(len);
        }
        if let Some(t) = threshold {
            if !(0.0..=1.0).contains(&t) {
                bail!("--threshold {t} outside [0, 1]");
            }
            self.threshold = t;
            self.train.threshold = t;
        }
        Ok(())
    }

    pub fn experiment(&self) -> ExperimentConfig {
        ExperimentConfig {
            vocab_size: self.vocab_size,
            threshold: self.threshold,
            model: self.model.clone(),
            train: self.train.clone(),
        }
    }
}
