//! Multiple-instance training from function labels.
//!
//! Each step scores every statement of each function in the batch, picks the
//! `k` highest-scoring statements of each function, and trains those towards
//! the function's own label. Statements outside the selection get no loss.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::encoder::Mode;
use crate::metrics::{confusion_and_prf, predict_all, MetricsError};
use crate::model::{Model, ModelError};
use crate::segmenter::PreparedSample;
use crate::tensor::{AdamW, AdamWConfig, Graph, TensorError, Var};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("the training split is empty")]
    EmptyTrainSplit,
    #[error("training diverged at epoch {epoch}, step {step}")]
    Diverged {
        epoch: usize,
        step: usize,
        #[source]
        source: ModelError,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub k: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    /// Decision threshold used for validation predictions.
    pub threshold: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let opt = AdamWConfig::default();
        Self {
            k: 3,
            batch_size: 16,
            lr: 1e-3,
            max_epochs: 30,
            patience: 10,
            seed: 42,
            threshold: 0.5,
            beta1: opt.beta1,
            beta2: opt.beta2,
            eps: opt.eps,
            weight_decay: opt.weight_decay,
        }
    }
}

impl TrainConfig {
    /// Batch 16, learning rate 2e-5, 50 epochs, patience 10.
    pub fn full_scale() -> Self {
        Self {
            lr: 2e-5,
            max_epochs: 50,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.into()));
        if self.k == 0 {
            return bad("k must be at least 1");
        }
        if self.patience == 0 {
            return bad("patience must be at least 1");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad("lr must be a non-negative number");
        }
        Ok(())
    }

    pub fn optimizer(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
        }
    }
}

/// Statements that receive the function label in one step.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PseudoLabelAssignment {
    /// Score positions, highest score first.
    pub selected: Vec<usize>,
    pub label: u8,
}

/// The `min(k, m)` highest scores; equal scores prefer the lower position.
pub fn select_topk_pseudo_labels(p: &[f64], label: u8, k: usize) -> PseudoLabelAssignment {
    let mut order: Vec<usize> = (0..p.len()).collect();
    order.sort_by(|&a, &b| p[b].total_cmp(&p[a]));
    order.truncate(k.min(p.len()));
    PseudoLabelAssignment { selected: order, label }
}

/// Mean over functions of each function's mean cross-entropy across its
/// selected statements. `p` is the node of fused scores for one function.
pub fn mil_loss(g: &mut Graph, batch: &[(Var, &PseudoLabelAssignment)]) -> Result<Var, TensorError> {
    if batch.is_empty() {
        return Err(TensorError::Shape {
            op: "mil_loss",
            detail: "empty batch".into(),
        });
    }
    let mut per_fn = Vec::with_capacity(batch.len());
    for &(p, a) in batch {
        let picked = g.gather(p, &a.selected)?;
        let targets = vec![f64::from(a.label); a.selected.len()];
        per_fn.push(g.binary_cross_entropy(picked, &targets)?);
    }
    let total = g.sum(&per_fn)?;
    g.scale(total, 1.0 / batch.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    /// `None` when there is no validation split.
    pub val_f1: Option<f64>,
    pub val_acc: Option<f64>,
    pub best_so_far: bool,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters from the best validation epoch (the last epoch when there
    /// is no validation split).
    pub model: Model,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub stopped_early: bool,
}

fn run_step(
    model: &mut Model,
    opt: &mut AdamW,
    batch: &[&PreparedSample],
    k: usize,
    rng: &mut ChaCha8Rng,
) -> Result<f64, ModelError> {
    let mut g = Graph::new();
    let vars = model.bind(&mut g)?;
    let mut fused = Vec::with_capacity(batch.len());
    let mut picks = Vec::with_capacity(batch.len());
    for s in batch {
        let out = model.forward(&mut g, &vars, &s.tokens, Mode::Train, rng)?;
        picks.push(select_topk_pseudo_labels(g.value(out.p).data(), s.sample.label, k));
        fused.push(out.p);
    }
    let items: Vec<(Var, &PseudoLabelAssignment)> = fused.iter().copied().zip(picks.iter()).collect();
    let loss = mil_loss(&mut g, &items)?;
    let value = g.value(loss).data()[0];
    g.backward(loss)?;
    model.params.zero_grad();
    model.params.accumulate_grads(&g, &vars.binding)?;
    opt.step(&mut model.params)?;
    Ok(value)
}

fn validate(model: &Model, valid: &[PreparedSample], threshold: f64) -> Result<(f64, f64), TrainError> {
    let preds = predict_all(model, valid, threshold)?;
    let yhat: Vec<u8> = preds.iter().map(|p| p.predicted_label).collect();
    let y: Vec<u8> = valid.iter().map(|s| s.sample.label).collect();
    let m = confusion_and_prf(&yhat, &y)?;
    Ok((m.f1, m.accuracy))
}

/// Trains `model` in place of a copy and returns the best parameters.
/// `on_epoch` sees every history record as soon as it is final.
pub fn train(
    model: Model,
    train_set: &[PreparedSample],
    valid_set: &[PreparedSample],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(TrainError::EmptyTrainSplit);
    }
    if valid_set.is_empty() {
        log::warn!("no validation split; early stopping disabled, keeping the final epoch");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let mut opt = AdamW::new(cfg.optimizer());
    let mut current = model;
    let mut best = current.clone();
    let mut best_f1 = f64::NEG_INFINITY;
    let mut best_epoch = 0;
    let mut history = Vec::new();
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut stopped_early = false;

    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for (step, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<&PreparedSample> = chunk.iter().map(|&i| &train_set[i]).collect();
            let loss = run_step(&mut current, &mut opt, &batch, cfg.k, &mut rng).map_err(|source| {
                TrainError::Diverged {
                    epoch,
                    step: step + 1,
                    source,
                }
            })?;
            loss_sum += loss * batch.len() as f64;
        }
        let train_loss = loss_sum / train_set.len() as f64;

        let record = if valid_set.is_empty() {
            best_epoch = epoch;
            EpochRecord {
                epoch,
                train_loss,
                val_f1: None,
                val_acc: None,
                best_so_far: false,
            }
        } else {
            let (f1, acc) = validate(&current, valid_set, cfg.threshold)?;
            let improved = f1 > best_f1;
            if improved {
                best_f1 = f1;
                best_epoch = epoch;
                best = current.clone();
            }
            EpochRecord {
                epoch,
                train_loss,
                val_f1: Some(f1),
                val_acc: Some(acc),
                best_so_far: improved,
            }
        };
        log::info!(
            "epoch {epoch}: loss {train_loss:.5} val_f1 {:?}",
            record.val_f1
        );
        on_epoch(&record);
        history.push(record);
        if !valid_set.is_empty() && epoch - best_epoch >= cfg.patience {
            stopped_early = epoch < cfg.max_epochs;
            break;
        }
    }
    let model = if valid_set.is_empty() { current } else { best };
    Ok(TrainOutcome {
        model,
        history,
        best_epoch,
        stopped_early,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn selection_examples() {
        let p = [0.9, 0.2, 0.7, 0.1];
        let a = select_topk_pseudo_labels(&p, 1, 2);
        assert_eq!(a.selected, vec![0, 2]);
        assert_eq!(a.label, 1);
        let a = select_topk_pseudo_labels(&p, 0, 2);
        assert_eq!(a.selected, vec![0, 2]);
        assert_eq!(a.label, 0);
        assert_eq!(select_topk_pseudo_labels(&[0.3, 0.4], 1, 5).selected, vec![1, 0]);
        assert_eq!(select_topk_pseudo_labels(&[0.5, 0.5, 0.5], 1, 2).selected, vec![0, 1]);
    }

    fn loss_of(p: &[f64], label: u8, k: usize) -> f64 {
        let mut g = Graph::new();
        let v = g.constant(crate::tensor::Tensor::vector(p.to_vec()).unwrap());
        let a = select_topk_pseudo_labels(p, label, k);
        let l = mil_loss(&mut g, &[(v, &a)]).unwrap();
        g.value(l).data()[0]
    }

    #[test]
    fn loss_examples() {
        let expected = (-(0.8f64.ln()) - 0.5f64.ln()) / 2.0;
        assert!((loss_of(&[0.8, 0.5, 0.1], 1, 2) - expected).abs() < 1e-12);
        assert!((expected - 0.4581).abs() < 1e-4);
        assert!((loss_of(&[0.5], 1, 1) - std::f64::consts::LN_2).abs() < 1e-12);
        assert!(loss_of(&[1.0 - 1e-12, 1.0 - 1e-12, 0.2], 1, 2) < 1e-9);
    }

    #[test]
    fn config_checks() {
        assert!(TrainConfig::default().validate().is_ok());
        assert!(TrainConfig { k: 0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { patience: 0, ..Default::default() }.validate().is_err());
        assert_eq!(TrainConfig::full_scale().lr, 2e-5);
    }
}
