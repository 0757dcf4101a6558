use std::collections::BTreeSet;
use std::path::Path;

use serde::Deserialize;

use super::{io_err, CorpusError};
use crate::segmenter::{strip_comments, FunctionSample, Split};

/// A function before and after its security fix.
#[derive(Debug, Clone, PartialEq, Eq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FixPair {
    pub id: String,
    pub code_before: String,
    pub code_after: String,
    #[serde(default)]
    pub cwe: Option<String>,
    #[serde(default = "default_split")]
    pub split: Split,
}

fn default_split() -> Split {
    Split::Train
}

/// Index pairs of one longest common subsequence of `a` and `b`, ascending.
/// When several exist, the one that matches earliest in `a` is returned.
pub fn lcs_matches<T: PartialEq>(a: &[T], b: &[T]) -> Vec<(usize, usize)> {
    let (n, m) = (a.len(), b.len());
    // suffix[i][j] = LCS length of a[i..] and b[j..]
    let mut suffix = vec![vec![0u32; m + 1]; n + 1];
    for i in (0..n).rev() {
        for j in (0..m).rev() {
            suffix[i][j] = if a[i] == b[j] {
                suffix[i + 1][j + 1] + 1
            } else {
                suffix[i + 1][j].max(suffix[i][j + 1])
            };
        }
    }
    let mut out = Vec::with_capacity(suffix[0][0] as usize);
    let (mut i, mut j) = (0, 0);
    while i < n && j < m {
        if a[i] == b[j] && suffix[i][j] == suffix[i + 1][j + 1] + 1 {
            out.push((i, j));
            i += 1;
            j += 1;
        } else if suffix[i][j + 1] >= suffix[i + 1][j] {
            j += 1;
        } else {
            i += 1;
        }
    }
    out
}

fn non_blank(stripped: &str) -> Vec<(usize, &str)> {
    stripped
        .lines()
        .enumerate()
        .map(|(i, l)| (i, l.trim()))
        .filter(|(_, l)| !l.is_empty())
        .collect()
}

/// Labels the pre-fix function by a line diff against the fixed version.
///
/// Lines are compared after comment stripping and trimming; blank lines are
/// ignored. Pre-fix lines outside the common subsequence are vulnerable. A
/// run of added lines with no removed pre-fix line in the same gap marks the
/// pre-fix line just before the gap, or the first line when the gap is at the
/// start. An added line identical to a removed one is a move and marks
/// nothing further.
pub fn label_statements_from_fix(pair: &FixPair) -> FunctionSample {
    let before = strip_comments(&pair.code_before);
    let after = strip_comments(&pair.code_after);
    let pre = non_blank(&before);
    let post = non_blank(&after);
    let pre_text: Vec<&str> = pre.iter().map(|p| p.1).collect();
    let post_text: Vec<&str> = post.iter().map(|p| p.1).collect();
    let matches = lcs_matches(&pre_text, &post_text);

    let matched_pre: BTreeSet<usize> = matches.iter().map(|m| m.0).collect();
    let matched_post: BTreeSet<usize> = matches.iter().map(|m| m.1).collect();
    let mut vulnerable: BTreeSet<usize> = (0..pre.len())
        .filter(|i| !matched_pre.contains(i))
        .map(|i| pre[i].0)
        .collect();

    let removed_text: BTreeSet<&str> = (0..pre.len())
        .filter(|i| !matched_pre.contains(i))
        .map(|i| pre[i].1)
        .collect();
    for q in (0..post.len()).filter(|q| !matched_post.contains(q)) {
        if removed_text.contains(post[q].1) {
            continue;
        }
        let prev = matches.iter().rev().find(|m| m.1 < q).map(|m| m.0);
        let next = matches.iter().find(|m| m.1 > q).map_or(pre.len(), |m| m.0);
        let gap_start = prev.map_or(0, |p| p + 1);
        let has_removal = (gap_start..next).any(|i| !matched_pre.contains(&i));
        if has_removal || pre.is_empty() {
            continue;
        }
        vulnerable.insert(pre[prev.unwrap_or(0)].0);
    }

    if pre_text == post_text {
        log::warn!("fix pair `{}` has no line changes; labeled clean", pair.id);
    }
    FunctionSample {
        id: pair.id.clone(),
        source: pair.code_before.clone(),
        label: u8::from(!vulnerable.is_empty()),
        vulnerable_lines: Some(vulnerable),
        cwe: pair.cwe.clone(),
        split: pair.split,
    }
}

/// JSON Lines of `{id, code_before, code_after, cwe?, split?}`; `split`
/// defaults to `train`.
pub fn parse_fix_pairs(text: &str) -> Result<Vec<FixPair>, CorpusError> {
    let mut out = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for (i, raw) in text.lines().enumerate() {
        if raw.trim().is_empty() {
            continue;
        }
        let pair: FixPair = serde_json::from_str(raw).map_err(|e| CorpusError::Malformed {
            line: i + 1,
            message: e.to_string(),
        })?;
        if !seen.insert(pair.id.clone()) {
            return Err(CorpusError::DuplicateId { line: i + 1, id: pair.id });
        }
        out.push(pair);
    }
    if out.is_empty() {
        return Err(CorpusError::Empty);
    }
    Ok(out)
}

pub fn load_fix_pairs(path: &Path) -> Result<Vec<FixPair>, CorpusError> {
    parse_fix_pairs(&std::fs::read_to_string(path).map_err(io_err(path))?)
}
