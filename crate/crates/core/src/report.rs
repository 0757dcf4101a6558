//! Text renderings: the metric table, per-statement score dumps and
//! annotated source listings.

use std::fmt::Write as _;

use serde::Serialize;

use crate::metrics::{EvalReport, FunctionPrediction, Prf};
use crate::segmenter::FunctionSample;

fn prf_rows(t: &mut String, name: &str, m: &Prf) {
    let flag = |undefined: bool| if undefined { "*" } else { "" };
    let _ = writeln!(
        t,
        "{name:<10} acc {:.4}  p {:.4}{}  r {:.4}{}  f1 {:.4}{}  (tp {} fp {} fn {} tn {})",
        m.accuracy,
        m.precision,
        flag(m.precision_undefined),
        m.recall,
        flag(m.recall_undefined),
        m.f1,
        flag(m.f1_undefined),
        m.tp,
        m.fp,
        m.fn_,
        m.tn
    );
}

/// Human-readable summary. `*` marks a ratio with a zero denominator.
pub fn render_table(report: &EvalReport) -> String {
    let mut t = String::new();
    let _ = writeln!(t, "functions evaluated: {}  threshold: {}", report.functions, report.threshold);
    prf_rows(&mut t, "function", &report.function_level);
    match &report.statement_level {
        Some(m) => prf_rows(&mut t, "statement", m),
        None => {
            let _ = writeln!(t, "{:<10} unavailable", "statement");
        }
    }
    match &report.ranking {
        Some(r) => {
            let _ = writeln!(
                t,
                "{:<10} top1 {:.4}  top3 {:.4}  top5 {:.4}  mfr {:.4}  mar {:.4}  ifa {:.4}  (over {} functions)",
                "ranking", r.top1, r.top3, r.top5, r.mfr, r.mar, r.ifa, r.functions
            );
        }
        None => {
            let _ = writeln!(t, "{:<10} unavailable", "ranking");
        }
    }
    if let Some(why) = &report.unavailable {
        let _ = writeln!(t, "note: {why}");
    }
    t
}

pub fn render_json(report: &EvalReport) -> String {
    let mut s = serde_json::to_string_pretty(report).expect("report serializes");
    s.push('\n');
    s
}

#[derive(Serialize)]
struct StatementRecord {
    line: usize,
    p: f64,
    p_max: f64,
    p_mean: f64,
    predicted: u8,
}

#[derive(Serialize)]
struct ScoreRecord<'a> {
    id: &'a str,
    predicted_label: u8,
    statements: Vec<StatementRecord>,
    ranking: Vec<usize>,
}

/// One JSON object per function: statement scores by line and the ranked
/// line list.
pub fn score_dump(predictions: &[FunctionPrediction]) -> String {
    let mut out = String::new();
    for p in predictions {
        let s = &p.scores;
        let rec = ScoreRecord {
            id: &p.id,
            predicted_label: p.predicted_label,
            statements: (0..s.m_eff())
                .map(|i| StatementRecord {
                    line: s.lines[i],
                    p: s.p[i],
                    p_max: s.p_max[i],
                    p_mean: s.p_mean[i],
                    predicted: p.statement_labels[i],
                })
                .collect(),
            ranking: p.ranked_lines(),
        };
        out.push_str(&serde_json::to_string(&rec).expect("record serializes"));
        out.push('\n');
    }
    out
}

/// The original source with each scored line's probability and rank. Lines
/// ranked within `top_k` are marked `>`, ground-truth lines `!`.
pub fn render_annotated(sample: &FunctionSample, prediction: &FunctionPrediction, top_k: usize) -> String {
    let s = &prediction.scores;
    let mut rank_of = vec![None; sample.source.lines().count().max(1)];
    let mut score_of = vec![None; rank_of.len()];
    for (r, &i) in prediction.ranking.iter().enumerate() {
        if let Some(slot) = rank_of.get_mut(s.lines[i]) {
            *slot = Some(r + 1);
            score_of[s.lines[i]] = Some(s.p[i]);
        }
    }
    let truth = sample.vulnerable_lines.clone().unwrap_or_default();
    let mut t = String::new();
    let _ = writeln!(
        t,
        "== {}  label {}  predicted {}",
        sample.id, sample.label, prediction.predicted_label
    );
    for (i, line) in sample.source.lines().enumerate() {
        let mark = match rank_of[i] {
            Some(r) if r <= top_k => '>',
            _ => ' ',
        };
        let gt = if truth.contains(&i) { '!' } else { ' ' };
        let score = match (score_of[i], rank_of[i]) {
            (Some(p), Some(r)) => format!("{p:.3} #{r:<3}"),
            _ => " ".repeat(10),
        };
        let _ = writeln!(t, "{mark}{gt} {i:>4} {score} | {line}");
    }
    t
}
