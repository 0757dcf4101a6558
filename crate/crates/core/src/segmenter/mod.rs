//! From raw function source to statements, subword ids and token-to-statement
//! membership.
//!
//! A statement is one non-blank physical line of the comment-stripped source.
//! Statement `j` keeps the 0-based line index it came from, which is how
//! ground-truth vulnerable lines are matched against model scores.

mod bpe;
mod comments;

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use bpe::{pre_tokenize, train_bpe, BpeVocab, BYTE_ALPHABET};
pub use comments::{strip_comments, strip_comments_checked, Stripped};

pub const DEFAULT_MAX_LEN: usize = 512;
pub const DEFAULT_VOCAB_SIZE: usize = 4096;

#[derive(Debug, Error)]
pub enum SegmentError {
    #[error("function `{0}` has no statements")]
    NoStatements(String),
    #[error("function `{0}` has no tokens within the length limit")]
    NoSurvivingTokens(String),
    #[error("empty BPE training corpus")]
    EmptyCorpus,
    #[error("vocabulary size {requested} must exceed the base alphabet of {alphabet}")]
    VocabTooSmall { requested: usize, alphabet: usize },
    #[error("vocabulary file: {0}")]
    Vocab(String),
    #[error("max_len must be at least 1")]
    ZeroMaxLen,
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "valid" => Ok(Split::Valid),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split `{other}` (expected train, valid or test)")),
        }
    }
}

/// One source function with its function-level label.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FunctionSample {
    pub id: String,
    pub source: String,
    pub label: u8,
    /// 0-based line indices into the comment-stripped source.
    pub vulnerable_lines: Option<BTreeSet<usize>>,
    pub cwe: Option<String>,
    pub split: Split,
}

impl FunctionSample {
    pub fn is_vulnerable(&self) -> bool {
        self.label == 1
    }

    /// Statement-level ground truth is known: either the function is clean
    /// or its vulnerable lines were supplied.
    pub fn has_line_labels(&self) -> bool {
        self.label == 0 || self.vulnerable_lines.as_ref().is_some_and(|l| !l.is_empty())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Statement {
    pub line: usize,
    pub text: String,
}

/// One statement per non-blank line, in source order.
pub fn segment_statements(stripped: &str) -> Vec<Statement> {
    stripped
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(line, l)| Statement {
            line,
            text: l.trim().to_string(),
        })
        .collect()
}

/// Subword ids of one function plus the sparse statement indicator.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenizedFunction {
    pub token_ids: Vec<u32>,
    /// `statement_of_token[i] = j` iff token `i` belongs to statement `j`.
    pub statement_of_token: Vec<usize>,
    /// Source line of each statement.
    pub statement_lines: Vec<usize>,
    /// Statements whose tokens were all cut by the length limit.
    pub truncated_statements: BTreeSet<usize>,
}

impl TokenizedFunction {
    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }

    /// Statement count `m`, truncated statements included.
    pub fn num_statements(&self) -> usize {
        self.statement_lines.len()
    }

    pub fn positions(&self) -> std::ops::Range<usize> {
        0..self.token_ids.len()
    }

    /// Statements with at least one surviving token, ascending.
    pub fn scored_statements(&self) -> Vec<usize> {
        (0..self.num_statements())
            .filter(|j| !self.truncated_statements.contains(j))
            .collect()
    }

    /// Member token indices of every scored statement, in the order of
    /// [`TokenizedFunction::scored_statements`].
    pub fn segments(&self) -> Vec<Vec<usize>> {
        let mut members = vec![Vec::new(); self.num_statements()];
        for (i, &j) in self.statement_of_token.iter().enumerate() {
            members[j].push(i);
        }
        members.into_iter().filter(|m| !m.is_empty()).collect()
    }

    /// Source lines of the scored statements.
    pub fn scored_lines(&self) -> Vec<usize> {
        self.scored_statements()
            .into_iter()
            .map(|j| self.statement_lines[j])
            .collect()
    }

    /// Whether `line` is a statement that kept at least one token.
    pub fn line_survives(&self, line: usize) -> bool {
        self.statement_lines
            .iter()
            .position(|&l| l == line)
            .is_some_and(|j| !self.truncated_statements.contains(&j))
    }
}

/// Strips comments, segments, and encodes statements in order, cutting the
/// sequence at `max_len` tokens.
pub fn tokenize_function(
    sample: &FunctionSample,
    vocab: &BpeVocab,
    max_len: usize,
) -> Result<TokenizedFunction, SegmentError> {
    if max_len == 0 {
        return Err(SegmentError::ZeroMaxLen);
    }
    let statements = segment_statements(&strip_comments(&sample.source));
    if statements.is_empty() {
        return Err(SegmentError::NoStatements(sample.id.clone()));
    }
    let mut token_ids = Vec::new();
    let mut statement_of_token = Vec::new();
    let mut truncated_statements = BTreeSet::new();
    for (j, st) in statements.iter().enumerate() {
        let room = max_len - token_ids.len();
        if room == 0 {
            truncated_statements.insert(j);
            continue;
        }
        let ids = vocab.encode(&st.text);
        let keep = ids.len().min(room);
        token_ids.extend_from_slice(&ids[..keep]);
        statement_of_token.extend(std::iter::repeat(j).take(keep));
    }
    if token_ids.is_empty() {
        return Err(SegmentError::NoSurvivingTokens(sample.id.clone()));
    }
    Ok(TokenizedFunction {
        token_ids,
        statement_of_token,
        statement_lines: statements.iter().map(|s| s.line).collect(),
        truncated_statements,
    })
}

/// A sample together with its tokenization.
#[derive(Debug, Clone)]
pub struct PreparedSample {
    pub sample: FunctionSample,
    pub tokens: TokenizedFunction,
}

impl PreparedSample {
    /// Vulnerable lines that are statements with surviving tokens.
    pub fn surviving_vulnerable_lines(&self) -> BTreeSet<usize> {
        self.sample
            .vulnerable_lines
            .iter()
            .flatten()
            .copied()
            .filter(|&l| self.tokens.line_survives(l))
            .collect()
    }
}

/// Drops vulnerable samples whose labeled lines all fell outside the token
/// window. Returns the kept samples and the number removed.
pub fn filter_truncation_conflicts(dataset: Vec<PreparedSample>) -> (Vec<PreparedSample>, usize) {
    let before = dataset.len();
    let kept: Vec<_> = dataset
        .into_iter()
        .filter(|p| {
            let conflicted = p.sample.label == 1
                && p.sample.vulnerable_lines.as_ref().is_some_and(|l| !l.is_empty())
                && p.surviving_vulnerable_lines().is_empty();
            if conflicted {
                log::debug!("dropping `{}`: vulnerable lines truncated", p.sample.id);
            }
            !conflicted
        })
        .collect();
    let removed = before - kept.len();
    if removed > 0 {
        log::info!("removed {removed} samples whose vulnerable lines were truncated");
    }
    (kept, removed)
}
