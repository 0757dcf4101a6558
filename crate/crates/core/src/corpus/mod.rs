//! Dataset files, fix-pair labeling, summary statistics and a synthetic
//! corpus generator.
//!
//! Datasets are JSON Lines, one function per line:
//!
//! ```text
//! {"id":"f1","code":"int f() {\n...","label":1,"vulnerable_lines":[3],"cwe":"CWE-787","split":"train"}
//! ```
//!
//! `vulnerable_lines` and `cwe` are optional. Line indices are 0-based.

mod diff;
mod synthetic;

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::segmenter::{segment_statements, strip_comments, FunctionSample, Split};

pub use diff::{label_statements_from_fix, lcs_matches, load_fix_pairs, parse_fix_pairs, FixPair};
pub use synthetic::{generate_synthetic, SyntheticSpec, BENIGN_TEMPLATES, PLANTED_TEMPLATES};

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("cannot access {path}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("dataset is empty")]
    Empty,
    #[error("line {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error("line {line}: duplicate id `{id}`")]
    DuplicateId { line: usize, id: String },
    #[error("invalid synthetic spec: {0}")]
    Spec(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CorpusError + '_ {
    move |source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Record {
    id: String,
    code: String,
    label: u8,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    vulnerable_lines: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    cwe: Option<String>,
    split: Split,
}

fn check_sample(s: &FunctionSample) -> Result<(), String> {
    if s.label > 1 {
        return Err(format!("label {} is not 0 or 1", s.label));
    }
    if s.id.is_empty() {
        return Err("empty id".into());
    }
    if let Some(lines) = &s.vulnerable_lines {
        if s.label == 0 && !lines.is_empty() {
            return Err("vulnerable_lines given for a label-0 function".into());
        }
        let count = strip_comments(&s.source).lines().count();
        if let Some(&bad) = lines.iter().find(|&&l| l >= count) {
            return Err(format!("vulnerable line {bad} beyond the {count} lines of `{}`", s.id));
        }
    }
    Ok(())
}

/// Parses and validates JSON Lines text. Blank lines are skipped.
pub fn parse_dataset(text: &str) -> Result<Vec<FunctionSample>, CorpusError> {
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let rec: Record = serde_json::from_str(raw).map_err(|e| CorpusError::Malformed {
            line,
            message: e.to_string(),
        })?;
        let sample = FunctionSample {
            id: rec.id,
            source: rec.code,
            label: rec.label,
            vulnerable_lines: rec.vulnerable_lines.map(|v| v.into_iter().collect()),
            cwe: rec.cwe,
            split: rec.split,
        };
        check_sample(&sample).map_err(|message| CorpusError::Malformed { line, message })?;
        if !seen.insert(sample.id.clone()) {
            return Err(CorpusError::DuplicateId { line, id: sample.id });
        }
        out.push(sample);
    }
    if out.is_empty() {
        return Err(CorpusError::Empty);
    }
    Ok(out)
}

pub fn load_dataset(path: &Path) -> Result<Vec<FunctionSample>, CorpusError> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    parse_dataset(&text)
}

pub fn dataset_to_jsonl(samples: &[FunctionSample]) -> String {
    let mut out = String::new();
    for s in samples {
        let rec = Record {
            id: s.id.clone(),
            code: s.source.clone(),
            label: s.label,
            vulnerable_lines: s.vulnerable_lines.as_ref().map(|l| l.iter().copied().collect()),
            cwe: s.cwe.clone(),
            split: s.split,
        };
        out.push_str(&serde_json::to_string(&rec).expect("record serializes"));
        out.push('\n');
    }
    out
}

pub fn save_dataset(path: &Path, samples: &[FunctionSample]) -> Result<(), CorpusError> {
    std::fs::write(path, dataset_to_jsonl(samples)).map_err(io_err(path))
}

/// Samples of one split, in file order.
pub fn split_of(samples: &[FunctionSample], split: Split) -> Vec<FunctionSample> {
    samples.iter().filter(|s| s.split == split).cloned().collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitStats {
    pub functions: usize,
    pub vulnerable: usize,
    pub clean: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub functions: usize,
    pub vulnerable: usize,
    pub clean: usize,
    pub splits: BTreeMap<String, SplitStats>,
    /// Mean statements per function.
    pub avg_statements: f64,
    /// Vulnerable functions that carry line labels.
    pub vulnerable_with_lines: usize,
    /// Mean vulnerable statements per vulnerable function with line labels,
    /// `None` when there are none.
    pub avg_vulnerable_statements: Option<f64>,
}

pub fn dataset_stats(samples: &[FunctionSample]) -> DatasetStats {
    let mut splits: BTreeMap<String, SplitStats> = BTreeMap::new();
    let mut statements = 0usize;
    let mut vul_fns = 0usize;
    let mut vul_statements = 0usize;
    for s in samples {
        let e = splits.entry(s.split.as_str().to_string()).or_insert(SplitStats {
            functions: 0,
            vulnerable: 0,
            clean: 0,
        });
        e.functions += 1;
        if s.is_vulnerable() {
            e.vulnerable += 1;
        } else {
            e.clean += 1;
        }
        let st = segment_statements(&strip_comments(&s.source));
        statements += st.len();
        if let Some(lines) = s.vulnerable_lines.as_ref().filter(|l| s.is_vulnerable() && !l.is_empty()) {
            let stmt_lines: BTreeSet<usize> = st.iter().map(|x| x.line).collect();
            vul_fns += 1;
            vul_statements += lines.intersection(&stmt_lines).count();
        }
    }
    let vulnerable = samples.iter().filter(|s| s.is_vulnerable()).count();
    DatasetStats {
        functions: samples.len(),
        vulnerable,
        clean: samples.len() - vulnerable,
        splits,
        avg_statements: if samples.is_empty() {
            0.0
        } else {
            statements as f64 / samples.len() as f64
        },
        vulnerable_with_lines: vul_fns,
        avg_vulnerable_statements: (vul_fns > 0).then(|| vul_statements as f64 / vul_fns as f64),
    }
}

impl DatasetStats {
    pub fn to_table(&self) -> String {
        let mut t = String::new();
        let _ = writeln!(t, "{:<8} {:>9} {:>10} {:>7}", "split", "functions", "vulnerable", "clean");
        for (name, s) in &self.splits {
            let _ = writeln!(t, "{:<8} {:>9} {:>10} {:>7}", name, s.functions, s.vulnerable, s.clean);
        }
        let _ = writeln!(t, "{:<8} {:>9} {:>10} {:>7}", "total", self.functions, self.vulnerable, self.clean);
        let _ = writeln!(t, "avg statements per function:            {:.2}", self.avg_statements);
        match self.avg_vulnerable_statements {
            Some(v) => {
                let _ = writeln!(
                    t,
                    "avg vulnerable statements per function: {v:.2} ({} functions with line labels)",
                    self.vulnerable_with_lines
                );
            }
            None => {
                let _ = writeln!(t, "avg vulnerable statements per function: n/a (no line labels)");
            }
        }
        t
    }
}
