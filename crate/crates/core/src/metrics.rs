//! Function and statement predictions, and the classification and ranking
//! metrics used to score them.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::head::StatementScores;
use crate::model::{Model, ModelError};
use crate::segmenter::PreparedSample;

pub const DEFAULT_THRESHOLD: f64 = 0.5;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("no predictions to score")]
    Empty,
    #[error("{predictions} predictions for {labels} labels")]
    LengthMismatch { predictions: usize, labels: usize },
    #[error("no vulnerable function with a surviving vulnerable statement")]
    EmptyRankingSet,
    #[error("function {0} has no vulnerable statement in its ranking")]
    NoHit(usize),
    #[error("prediction for `{found}` does not match sample `{expected}`")]
    Misaligned { expected: String, found: String },
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FunctionPrediction {
    pub id: String,
    pub predicted_label: u8,
    /// `1` where `p > threshold`, aligned with `scores`.
    pub statement_labels: Vec<u8>,
    pub scores: StatementScores,
    /// Positions into `scores`, most suspicious first.
    pub ranking: Vec<usize>,
}

impl FunctionPrediction {
    pub fn ranked_lines(&self) -> Vec<usize> {
        self.ranking.iter().map(|&i| self.scores.lines[i]).collect()
    }
}

/// Descending by score; equal scores keep their original (line) order.
pub fn rank_statements(p: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..p.len()).collect();
    order.sort_by(|&a, &b| p[b].total_cmp(&p[a]));
    order
}

pub fn predict_function(id: &str, scores: StatementScores, threshold: f64) -> FunctionPrediction {
    let statement_labels: Vec<u8> = scores.p.iter().map(|&p| u8::from(p > threshold)).collect();
    let predicted_label = statement_labels.iter().copied().max().unwrap_or(0);
    FunctionPrediction {
        id: id.to_string(),
        predicted_label,
        statement_labels,
        ranking: rank_statements(&scores.p),
        scores,
    }
}

/// Binary classification summary. Undefined ratios are reported as 0 with
/// the matching flag set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub tn: usize,
    pub precision_undefined: bool,
    pub recall_undefined: bool,
    pub f1_undefined: bool,
}

/// Harmonic mean of precision and recall, 0 when both are 0.
pub fn f1_score(precision: f64, recall: f64) -> f64 {
    if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    }
}

fn ratio(num: usize, den: usize) -> (f64, bool) {
    if den == 0 {
        (0.0, true)
    } else {
        (num as f64 / den as f64, false)
    }
}

impl Prf {
    pub fn from_counts(tp: usize, fp: usize, fn_: usize, tn: usize) -> Self {
        let total = tp + fp + fn_ + tn;
        let (accuracy, _) = ratio(tp + tn, total);
        let (precision, precision_undefined) = ratio(tp, tp + fp);
        let (recall, recall_undefined) = ratio(tp, tp + fn_);
        Self {
            accuracy,
            precision,
            recall,
            f1: f1_score(precision, recall),
            tp,
            fp,
            fn_,
            tn,
            precision_undefined,
            recall_undefined,
            f1_undefined: precision + recall == 0.0,
        }
    }
}

pub fn confusion_and_prf(predictions: &[u8], labels: &[u8]) -> Result<Prf, MetricsError> {
    if predictions.len() != labels.len() {
        return Err(MetricsError::LengthMismatch {
            predictions: predictions.len(),
            labels: labels.len(),
        });
    }
    if predictions.is_empty() {
        return Err(MetricsError::Empty);
    }
    let (mut tp, mut fp, mut fn_, mut tn) = (0, 0, 0, 0);
    for (&p, &y) in predictions.iter().zip(labels) {
        match (p != 0, y != 0) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => tn += 1,
        }
    }
    Ok(Prf::from_counts(tp, fp, fn_, tn))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RankingMetrics {
    /// Size of the evaluated set of vulnerable functions.
    pub functions: usize,
    pub top1: f64,
    pub top3: f64,
    pub top5: f64,
    pub mfr: f64,
    pub mar: f64,
    /// Always `mfr - 1`.
    pub ifa: f64,
}

/// One vulnerable function: its ranked lines and its true vulnerable lines.
#[derive(Debug, Clone, PartialEq)]
pub struct RankedFunction {
    pub ranked_lines: Vec<usize>,
    pub vulnerable_lines: BTreeSet<usize>,
}

/// Top-k, MFR, MAR and IFA over `functions`. Ranks are 1-based; vulnerable
/// lines absent from a ranking are ignored, but every function must rank at
/// least one.
pub fn ranking_metrics(functions: &[RankedFunction]) -> Result<RankingMetrics, MetricsError> {
    if functions.is_empty() {
        return Err(MetricsError::EmptyRankingSet);
    }
    let n = functions.len() as f64;
    let mut first_sum = 0usize;
    let mut hits = [0usize; 3];
    let mut mar_sum = 0.0;
    for (f, rf) in functions.iter().enumerate() {
        let ranks: Vec<usize> = rf
            .ranked_lines
            .iter()
            .enumerate()
            .filter(|(_, l)| rf.vulnerable_lines.contains(l))
            .map(|(i, _)| i + 1)
            .collect();
        let Some(&first) = ranks.first() else {
            return Err(MetricsError::NoHit(f));
        };
        first_sum += first;
        for (h, k) in hits.iter_mut().zip([1, 3, 5]) {
            if first <= k {
                *h += 1;
            }
        }
        mar_sum += ranks.iter().sum::<usize>() as f64 / ranks.len() as f64;
    }
    let mfr = first_sum as f64 / n;
    Ok(RankingMetrics {
        functions: functions.len(),
        top1: hits[0] as f64 / n,
        top3: hits[1] as f64 / n,
        top5: hits[2] as f64 / n,
        mfr,
        mar: mar_sum / n,
        ifa: mfr - 1.0,
    })
}

/// Full evaluation of one split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub threshold: f64,
    pub functions: usize,
    pub function_level: Prf,
    /// Present when at least one vulnerable function carries line labels.
    pub statement_level: Option<Prf>,
    pub ranking: Option<RankingMetrics>,
    /// Why statement-level blocks are missing, if they are.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub unavailable: Option<String>,
}

/// Scores every sample in eval mode.
pub fn predict_all(
    model: &Model,
    samples: &[PreparedSample],
    threshold: f64,
) -> Result<Vec<FunctionPrediction>, MetricsError> {
    samples
        .iter()
        .map(|s| Ok(predict_function(&s.sample.id, model.score(&s.tokens)?, threshold)))
        .collect()
}

/// Builds the report from predictions aligned with `samples`.
pub fn evaluate_predictions(
    samples: &[PreparedSample],
    predictions: &[FunctionPrediction],
    threshold: f64,
) -> Result<EvalReport, MetricsError> {
    if samples.len() != predictions.len() {
        return Err(MetricsError::LengthMismatch {
            predictions: predictions.len(),
            labels: samples.len(),
        });
    }
    for (s, p) in samples.iter().zip(predictions) {
        if s.sample.id != p.id {
            return Err(MetricsError::Misaligned {
                expected: s.sample.id.clone(),
                found: p.id.clone(),
            });
        }
    }
    let fn_pred: Vec<u8> = predictions.iter().map(|p| p.predicted_label).collect();
    let fn_true: Vec<u8> = samples.iter().map(|s| s.sample.label).collect();
    let function_level = confusion_and_prf(&fn_pred, &fn_true)?;

    let any_lines = samples
        .iter()
        .any(|s| s.sample.is_vulnerable() && s.sample.has_line_labels());
    if !any_lines {
        return Ok(EvalReport {
            threshold,
            functions: samples.len(),
            function_level,
            statement_level: None,
            ranking: None,
            unavailable: Some("no vulnerable function carries line labels".into()),
        });
    }

    let mut st_pred = Vec::new();
    let mut st_true = Vec::new();
    let mut ranked = Vec::new();
    for (s, p) in samples.iter().zip(predictions) {
        if !s.sample.has_line_labels() {
            continue;
        }
        let truth = s.surviving_vulnerable_lines();
        for (line, &y) in p.scores.lines.iter().zip(&p.statement_labels) {
            st_pred.push(y);
            st_true.push(u8::from(truth.contains(line)));
        }
        if s.sample.is_vulnerable() && !truth.is_empty() {
            ranked.push(RankedFunction {
                ranked_lines: p.ranked_lines(),
                vulnerable_lines: truth,
            });
        }
    }
    let statement_level = Some(confusion_and_prf(&st_pred, &st_true)?);
    let (ranking, unavailable) = match ranking_metrics(&ranked) {
        Ok(r) => (Some(r), None),
        Err(MetricsError::EmptyRankingSet) => (None, Some("every labeled vulnerable line was truncated".into())),
        Err(e) => return Err(e),
    };
    Ok(EvalReport {
        threshold,
        functions: samples.len(),
        function_level,
        statement_level,
        ranking,
        unavailable,
    })
}

pub fn evaluate(
    model: &Model,
    samples: &[PreparedSample],
    threshold: f64,
) -> Result<(Vec<FunctionPrediction>, EvalReport), MetricsError> {
    let predictions = predict_all(model, samples, threshold)?;
    let report = evaluate_predictions(samples, &predictions, threshold)?;
    Ok((predictions, report))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scores(p: &[f64]) -> StatementScores {
        StatementScores {
            statements: (0..p.len()).collect(),
            lines: (0..p.len()).collect(),
            p: p.to_vec(),
            p_max: p.to_vec(),
            p_mean: p.to_vec(),
        }
    }

    fn rf(ranked: &[usize], vuln: &[usize]) -> RankedFunction {
        RankedFunction {
            ranked_lines: ranked.to_vec(),
            vulnerable_lines: vuln.iter().copied().collect(),
        }
    }

    #[test]
    fn prediction_examples() {
        let p = predict_function("a", scores(&[0.1, 0.4, 0.49]), 0.5);
        assert_eq!(p.predicted_label, 0);
        assert_eq!(p.statement_labels, vec![0, 0, 0]);
        let p = predict_function("b", scores(&[0.1, 0.9, 0.3]), 0.5);
        assert_eq!(p.predicted_label, 1);
        assert_eq!(p.ranking[0], 1);
        let p = predict_function("c", scores(&[0.5]), 0.5);
        assert_eq!(p.predicted_label, 0);
    }

    #[test]
    fn ranking_order_and_ties() {
        assert_eq!(rank_statements(&[0.2, 0.9, 0.5]), vec![1, 2, 0]);
        assert_eq!(rank_statements(&[0.3; 4]), vec![0, 1, 2, 3]);
        assert_eq!(rank_statements(&[0.1, 0.7, 0.7, 0.2]), vec![1, 2, 3, 0]);
    }

    #[test]
    fn f1_matches_reported_pairs() {
        assert!((f1_score(0.724, 0.522) - 0.607).abs() < 5e-4);
        assert!((f1_score(0.471, 0.394) - 0.429).abs() < 5e-4);
    }

    #[test]
    fn perfect_and_degenerate_confusion() {
        let m = confusion_and_prf(&[1, 0, 1, 0], &[1, 0, 1, 0]).unwrap();
        assert_eq!((m.accuracy, m.f1), (1.0, 1.0));
        let m = confusion_and_prf(&[0, 0], &[0, 0]).unwrap();
        assert!(m.precision_undefined && m.recall_undefined && m.f1_undefined);
        assert_eq!((m.precision, m.recall, m.f1, m.accuracy), (0.0, 0.0, 0.0, 1.0));
        assert!(matches!(confusion_and_prf(&[], &[]), Err(MetricsError::Empty)));
        assert!(confusion_and_prf(&[1], &[1, 0]).is_err());
    }

    #[test]
    fn ranking_metric_examples() {
        let m = ranking_metrics(&[rf(&[0, 1, 2], &[0]), rf(&[5, 4, 3, 2, 1, 0], &[0])]).unwrap();
        assert_eq!(m.top1, 0.5);
        assert_eq!(m.top5, 0.5);
        assert_eq!(m.mfr, 3.5);
        assert_eq!(m.ifa, 2.5);
        let m = ranking_metrics(&[rf(&[9, 7, 8, 6], &[7, 6])]).unwrap();
        assert_eq!(m.mar, 3.0);
        assert_eq!(m.mfr, 2.0);
        assert!(matches!(ranking_metrics(&[]), Err(MetricsError::EmptyRankingSet)));
        assert!(matches!(ranking_metrics(&[rf(&[1], &[2])]), Err(MetricsError::NoHit(0))));
    }
}
