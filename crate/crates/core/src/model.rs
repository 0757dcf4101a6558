//! The full statement scorer: encoder plus MIL head, with checkpointing.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::encoder::{self, EncoderConfig, EncoderVars, Mode};
use crate::head::{self, HeadConfig, HeadVars, StatementScores, StatementVars};
use crate::segmenter::TokenizedFunction;
use crate::tensor::{Binding, Graph, ParamStore, TensorError};

const CHECKPOINT_FORMAT: &str = "vulnmil-model";

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("non-finite activations in encoder layer {layer}")]
    NonFinite { layer: usize },
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("token id {id} outside vocabulary of {vocab}")]
    TokenOutOfVocab { id: u32, vocab: usize },
    #[error("sequence of {len} tokens exceeds max_len {max_len}")]
    SequenceTooLong { len: usize, max_len: usize },
    #[error("statement {0} has no surviving tokens")]
    EmptyStatement(usize),
    #[error("no statement {0}")]
    NoSuchStatement(usize),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub head: HeadConfig,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        self.encoder.validate()?;
        self.head.validate()
    }
}

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    format: String,
    config: ModelConfig,
}

/// Graph handles for every parameter of a [`Model`].
#[derive(Debug, Clone)]
pub struct ModelVars {
    pub binding: Binding,
    pub encoder: EncoderVars,
    pub head: HeadVars,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
}

impl Model {
    /// Fresh parameters drawn from a generator seeded with `seed`.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = Self::fresh_params(&config, &mut rng);
        Ok(Self { config, params })
    }

    fn fresh_params<R: Rng + ?Sized>(config: &ModelConfig, rng: &mut R) -> ParamStore {
        let mut params = ParamStore::new();
        encoder::init_params(&config.encoder, rng, &mut params);
        head::init_params(&config.head, config.encoder.hidden, rng, &mut params);
        params
    }

    /// Checks that `params` has exactly the tensors `config` calls for.
    pub fn from_parts(config: ModelConfig, params: ParamStore) -> Result<Self, ModelError> {
        config.validate()?;
        let expected = Self::fresh_params(&config, &mut ChaCha8Rng::seed_from_u64(0));
        let want: Vec<(&str, &[usize])> = expected.iter().map(|(n, t)| (n, t.shape())).collect();
        let got: Vec<(&str, &[usize])> = params.iter().map(|(n, t)| (n, t.shape())).collect();
        if want != got {
            let missing = want.iter().find(|w| !got.contains(w)).or(got.iter().find(|g| !want.contains(g)));
            return Err(ModelError::Checkpoint(format!(
                "parameters do not match the config (first mismatch: {:?})",
                missing.map(|m| m.0)
            )));
        }
        Ok(Self { config, params })
    }

    pub fn bind(&self, g: &mut Graph) -> Result<ModelVars, ModelError> {
        self.vars(self.params.bind(g))
    }

    /// Binding without gradient tracking.
    pub fn bind_frozen(&self, g: &mut Graph) -> Result<ModelVars, ModelError> {
        self.vars(self.params.bind_frozen(g))
    }

    fn vars(&self, binding: Binding) -> Result<ModelVars, ModelError> {
        Ok(ModelVars {
            encoder: EncoderVars::from_binding(&self.config.encoder, &binding)?,
            head: HeadVars::from_binding(&self.config.head, &binding)?,
            binding,
        })
    }

    /// Encoder and head for one function.
    pub fn forward<R: Rng + ?Sized>(
        &self,
        g: &mut Graph,
        vars: &ModelVars,
        tokens: &TokenizedFunction,
        mode: Mode,
        rng: &mut R,
    ) -> Result<StatementVars, ModelError> {
        let h = encoder::encode(g, &self.config.encoder, &vars.encoder, tokens, mode, rng)?;
        head::classify_statements(g, h, tokens, &vars.head)
    }

    /// Eval-mode statement scores for one function.
    pub fn score(&self, tokens: &TokenizedFunction) -> Result<StatementScores, ModelError> {
        let mut g = Graph::new();
        let vars = self.bind_frozen(&mut g)?;
        // Eval mode never draws from the generator.
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = self.forward(&mut g, &vars, tokens, Mode::Eval, &mut rng)?;
        Ok(StatementScores::from_graph(&g, &out))
    }

    pub fn fusion_weights(&self) -> Result<(f64, f64), ModelError> {
        Ok(head::fusion_weights(&self.config.head, &self.params)?)
    }

    fn metadata(&self) -> String {
        serde_json::to_string(&CheckpointMeta {
            format: CHECKPOINT_FORMAT.into(),
            config: self.config.clone(),
        })
        .expect("config serializes")
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        self.params.to_bytes(&self.metadata())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ModelError> {
        let (params, meta) = ParamStore::from_bytes(bytes)?;
        Self::from_meta(params, &meta)
    }

    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        Ok(self.params.save(path, &self.metadata())?)
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        let (params, meta) = ParamStore::load(path)?;
        Self::from_meta(params, &meta)
    }

    fn from_meta(params: ParamStore, meta: &str) -> Result<Self, ModelError> {
        let meta: CheckpointMeta =
            serde_json::from_str(meta).map_err(|e| ModelError::Checkpoint(format!("metadata: {e}")))?;
        if meta.format != CHECKPOINT_FORMAT {
            return Err(ModelError::Checkpoint(format!("unknown format `{}`", meta.format)));
        }
        Self::from_parts(meta.config, params)
    }
}
