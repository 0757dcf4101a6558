//! End-to-end steps shared by the command line tool and the tests: vocabulary
//! training, tokenization of whole datasets, and a full train-then-evaluate
//! run.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{split_of, CorpusError};
use crate::metrics::{evaluate, EvalReport, FunctionPrediction, MetricsError, DEFAULT_THRESHOLD};
use crate::model::{Model, ModelConfig, ModelError};
use crate::segmenter::{
    filter_truncation_conflicts, segment_statements, strip_comments, tokenize_function, train_bpe, BpeVocab,
    FunctionSample, PreparedSample, SegmentError, Split, DEFAULT_VOCAB_SIZE,
};
use crate::trainer::{train, EpochRecord, TrainConfig, TrainError, TrainOutcome};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Segment(#[from] SegmentError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("the {0} split is empty")]
    EmptySplit(&'static str),
    #[error("vocabulary has {vocab} entries but the model expects {model}")]
    VocabMismatch { vocab: usize, model: usize },
}

/// Every setting of a train-and-evaluate run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    /// Target BPE vocabulary size. The encoder's `vocab_size` is set from the
    /// trained vocabulary.
    pub vocab_size: usize,
    pub threshold: f64,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            vocab_size: DEFAULT_VOCAB_SIZE,
            threshold: DEFAULT_THRESHOLD,
            model: ModelConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

/// Trimmed statement texts of `samples`, the BPE training corpus.
pub fn statement_texts(samples: &[FunctionSample]) -> Vec<String> {
    samples
        .iter()
        .flat_map(|s| segment_statements(&strip_comments(&s.source)))
        .map(|st| st.text)
        .collect()
}

/// Learns merges from the training split only.
pub fn train_vocab(samples: &[FunctionSample], vocab_size: usize) -> Result<BpeVocab, PipelineError> {
    let train = split_of(samples, Split::Train);
    let texts = statement_texts(if train.is_empty() { samples } else { &train });
    Ok(train_bpe(&texts, vocab_size)?)
}

/// Tokenizes every sample. Functions with no statements are skipped with a
/// warning.
pub fn prepare(samples: &[FunctionSample], vocab: &BpeVocab, max_len: usize) -> Result<Vec<PreparedSample>, PipelineError> {
    let mut out = Vec::with_capacity(samples.len());
    for s in samples {
        match tokenize_function(s, vocab, max_len) {
            Ok(tokens) => out.push(PreparedSample {
                sample: s.clone(),
                tokens,
            }),
            Err(e @ (SegmentError::NoStatements(_) | SegmentError::NoSurvivingTokens(_))) => {
                log::warn!("skipping: {e}");
            }
            Err(e) => return Err(e.into()),
        }
    }
    Ok(out)
}

/// [`prepare`] followed by truncation-conflict filtering.
pub fn prepare_for_training(
    samples: &[FunctionSample],
    vocab: &BpeVocab,
    max_len: usize,
) -> Result<Vec<PreparedSample>, PipelineError> {
    Ok(filter_truncation_conflicts(prepare(samples, vocab, max_len)?).0)
}

pub fn check_vocab(model: &Model, vocab: &BpeVocab) -> Result<(), PipelineError> {
    if model.config.encoder.vocab_size != vocab.len() {
        return Err(PipelineError::VocabMismatch {
            vocab: vocab.len(),
            model: model.config.encoder.vocab_size,
        });
    }
    Ok(())
}

/// Trains a fresh model on the train split, selecting on the valid split.
pub fn train_model(
    samples: &[FunctionSample],
    vocab: &BpeVocab,
    cfg: &ExperimentConfig,
    on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome, PipelineError> {
    let mut model_cfg = cfg.model.clone();
    model_cfg.encoder.vocab_size = vocab.len();
    let max_len = model_cfg.encoder.max_len;
    let train_set = prepare_for_training(&split_of(samples, Split::Train), vocab, max_len)?;
    let valid_set = prepare_for_training(&split_of(samples, Split::Valid), vocab, max_len)?;
    if train_set.is_empty() {
        return Err(PipelineError::EmptySplit("train"));
    }
    let model = Model::init(model_cfg, cfg.train.seed)?;
    Ok(train(model, &train_set, &valid_set, &cfg.train, on_epoch)?)
}

/// Scores `split` and builds its report.
pub fn evaluate_split(
    model: &Model,
    vocab: &BpeVocab,
    samples: &[FunctionSample],
    split: Split,
    threshold: f64,
) -> Result<(Vec<PreparedSample>, Vec<FunctionPrediction>, EvalReport), PipelineError> {
    evaluate_samples(model, vocab, &split_of(samples, split), threshold).map_err(|e| match e {
        PipelineError::EmptySplit(_) => PipelineError::EmptySplit(split.as_str()),
        e => e,
    })
}

/// Scores every sample given and builds the report.
pub fn evaluate_samples(
    model: &Model,
    vocab: &BpeVocab,
    samples: &[FunctionSample],
    threshold: f64,
) -> Result<(Vec<PreparedSample>, Vec<FunctionPrediction>, EvalReport), PipelineError> {
    check_vocab(model, vocab)?;
    let prepared = prepare(samples, vocab, model.config.encoder.max_len)?;
    if prepared.is_empty() {
        return Err(PipelineError::EmptySplit("selected"));
    }
    let (predictions, report) = evaluate(model, &prepared, threshold)?;
    Ok((prepared, predictions, report))
}

pub struct ExperimentOutput {
    pub vocab: BpeVocab,
    pub outcome: TrainOutcome,
    pub test: Vec<PreparedSample>,
    pub predictions: Vec<FunctionPrediction>,
    pub report: EvalReport,
}

/// Vocabulary, training and test evaluation in one call.
pub fn run_experiment(
    samples: &[FunctionSample],
    cfg: &ExperimentConfig,
    on_epoch: impl FnMut(&EpochRecord),
) -> Result<ExperimentOutput, PipelineError> {
    let vocab = train_vocab(samples, cfg.vocab_size)?;
    let outcome = train_model(samples, &vocab, cfg, on_epoch)?;
    let (test, predictions, report) = evaluate_split(&outcome.model, &vocab, samples, Split::Test, cfg.threshold)?;
    Ok(ExperimentOutput {
        vocab,
        outcome,
        test,
        predictions,
        report,
    })
}
