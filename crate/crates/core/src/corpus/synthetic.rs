use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::CorpusError;
use crate::segmenter::{FunctionSample, Split};

/// Line templates of ordinary code. `{v}` `{w}` are integer variables,
/// `{a}` `{b}` buffers and `{n}` a small constant.
pub const BENIGN_TEMPLATES: &[&str] = &[
    "int {v} = {n};",
    "{v} = {w} + {n};",
    "{v} = {v} * 2;",
    "if ({v} > {n}) {v} = 0;",
    "for (int i = 0; i < {n}; i++) {v} += i;",
    "{a}[{n}] = {v};",
    "printf(\"%d\\n\", {v});",
    "strncpy({a}, {b}, sizeof({a}) - 1);",
    "{v} = strlen({b});",
    "memset({a}, 0, sizeof({a}));",
];

/// Line templates that make a function vulnerable.
pub const PLANTED_TEMPLATES: &[&str] = &[
    "strcpy({a}, {b});",
    "gets({a});",
    "sprintf({a}, \"%s\", {b});",
    "memcpy({a}, {b}, {v} * 4);",
    "free({a}); free({a});",
];

const INTS: &[&str] = &["len", "count", "idx", "total", "size", "offset", "n", "k"];
const BUFS: &[&str] = &["buf", "dst", "src", "name", "line", "tmp", "out", "data"];
const NAMES: &[&str] = &["parse_header", "copy_name", "read_line", "handle_request", "load_config", "format_entry", "update_state", "process_input"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub train: usize,
    pub valid: usize,
    pub test: usize,
    pub vulnerable_fraction: f64,
    /// Inclusive range of statements per function, header and closing brace
    /// included.
    pub statements: (usize, usize),
    /// Inclusive range of planted lines per vulnerable function.
    pub planted_lines: (usize, usize),
    pub planted_templates: Vec<String>,
    /// Chance that a line gets a trailing comment, or is followed by a blank
    /// or comment-only line.
    pub noise_rate: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            train: 200,
            valid: 50,
            test: 50,
            vulnerable_fraction: 0.3,
            statements: (8, 20),
            planted_lines: (1, 3),
            planted_templates: PLANTED_TEMPLATES.iter().map(|s| s.to_string()).collect(),
            noise_rate: 0.1,
            seed: 7,
        }
    }
}

impl SyntheticSpec {
    pub fn functions(&self) -> usize {
        self.train + self.valid + self.test
    }

    pub fn validate(&self) -> Result<(), CorpusError> {
        let bad = |m: String| Err(CorpusError::Spec(m));
        if self.functions() == 0 {
            return bad("no functions requested".into());
        }
        if !(0.0..1.0).contains(&self.vulnerable_fraction) {
            return bad(format!("vulnerable_fraction {} outside [0, 1)", self.vulnerable_fraction));
        }
        let (lo, hi) = self.statements;
        let (plo, phi) = self.planted_lines;
        if lo > hi || plo > phi {
            return bad("empty range".into());
        }
        if plo == 0 {
            return bad("vulnerable functions need at least one planted line".into());
        }
        // Header, return and closing brace take three statements.
        if lo < phi + 3 {
            return bad(format!(
                "at least {} statements per function are needed for {phi} planted lines",
                phi + 3
            ));
        }
        if self.planted_templates.is_empty() {
            return bad("no planted templates".into());
        }
        if !(0.0..=1.0).contains(&self.noise_rate) {
            return bad(format!("noise_rate {} outside [0, 1]", self.noise_rate));
        }
        Ok(())
    }
}

fn fill<R: Rng>(template: &str, rng: &mut R) -> String {
    let v = *INTS.choose(rng).expect("non-empty");
    let w = *INTS.choose(rng).expect("non-empty");
    let a = *BUFS.choose(rng).expect("non-empty");
    let b = *BUFS.choose(rng).expect("non-empty");
    let n = rng.gen_range(1..64).to_string();
    template
        .replace("{v}", v)
        .replace("{w}", w)
        .replace("{a}", a)
        .replace("{b}", b)
        .replace("{n}", &n)
}

fn function<R: Rng>(spec: &SyntheticSpec, vulnerable: bool, rng: &mut R) -> (String, BTreeSet<usize>) {
    let m = rng.gen_range(spec.statements.0..=spec.statements.1);
    let body = m - 3;
    let planted: BTreeSet<usize> = if vulnerable {
        let c = rng.gen_range(spec.planted_lines.0..=spec.planted_lines.1);
        rand::seq::index::sample(rng, body, c).into_iter().collect()
    } else {
        BTreeSet::new()
    };

    let mut lines: Vec<String> = vec![format!(
        "int {}(char *buf, char *src, int n) {{",
        NAMES.choose(rng).expect("non-empty")
    )];
    let mut vulnerable_lines = BTreeSet::new();
    for slot in 0..body {
        let (text, is_planted) = if planted.contains(&slot) {
            let t = spec.planted_templates.choose(rng).expect("validated non-empty");
            (fill(t, rng), true)
        } else {
            (fill(BENIGN_TEMPLATES.choose(rng).expect("non-empty"), rng), false)
        };
        let text = if rng.gen_bool(spec.noise_rate) {
            format!("    {text} // step {slot}")
        } else {
            format!("    {text}")
        };
        if is_planted {
            vulnerable_lines.insert(lines.len());
        }
        lines.push(text);
        if rng.gen_bool(spec.noise_rate) {
            lines.push(if rng.gen_bool(0.5) { String::new() } else { "    /* checked */".into() });
        }
    }
    lines.push(format!("    return {};", INTS.choose(rng).expect("non-empty")));
    lines.push("}".into());
    (lines.join("\n"), vulnerable_lines)
}

/// A seeded corpus of C-like functions. Vulnerable functions contain one or
/// more planted lines, whose indices are recorded as ground truth. Clean
/// functions record an empty line set.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Vec<FunctionSample>, CorpusError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let plan = [
        (Split::Train, spec.train),
        (Split::Valid, spec.valid),
        (Split::Test, spec.test),
    ];
    let mut out = Vec::with_capacity(spec.functions());
    let mut idx = 0;
    for (split, count) in plan {
        for _ in 0..count {
            let vulnerable = rng.gen_bool(spec.vulnerable_fraction);
            let (source, lines) = function(spec, vulnerable, &mut rng);
            out.push(FunctionSample {
                id: format!("syn-{}-{idx:05}", split.as_str()),
                source,
                label: u8::from(vulnerable),
                vulnerable_lines: Some(lines),
                cwe: None,
                split,
            });
            idx += 1;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::segmenter::{segment_statements, strip_comments};

    #[test]
    fn zero_fraction_is_all_clean() {
        let spec = SyntheticSpec {
            vulnerable_fraction: 0.0,
            ..Default::default()
        };
        let ds = generate_synthetic(&spec).unwrap();
        assert_eq!(ds.len(), 300);
        assert!(ds.iter().all(|s| s.label == 0));
    }

    #[test]
    fn same_seed_same_corpus() {
        let spec = SyntheticSpec::default();
        assert_eq!(generate_synthetic(&spec).unwrap(), generate_synthetic(&spec).unwrap());
        let other = SyntheticSpec { seed: 8, ..spec.clone() };
        assert_ne!(generate_synthetic(&spec).unwrap(), generate_synthetic(&other).unwrap());
    }

    #[test]
    fn planted_lines_are_recorded_statements() {
        let ds = generate_synthetic(&SyntheticSpec::default()).unwrap();
        for s in &ds {
            let st = segment_statements(&strip_comments(&s.source));
            assert!((8..=20).contains(&st.len()), "{}", st.len());
            let lines = s.vulnerable_lines.as_ref().unwrap();
            assert_eq!(s.label == 1, !lines.is_empty());
            assert!(lines.len() <= 3);
            let src: Vec<&str> = s.source.lines().collect();
            for &l in lines {
                assert!(PLANTED_TEMPLATES
                    .iter()
                    .any(|t| src[l].contains(t.split('(').next().unwrap())));
            }
        }
    }

    #[test]
    fn spec_validation() {
        let ok = SyntheticSpec::default();
        assert!(SyntheticSpec { vulnerable_fraction: 1.0, ..ok.clone() }.validate().is_err());
        assert!(SyntheticSpec { planted_lines: (0, 2), ..ok.clone() }.validate().is_err());
        assert!(SyntheticSpec { statements: (5, 20), ..ok.clone() }.validate().is_err());
        assert!(SyntheticSpec { train: 0, valid: 0, test: 0, ..ok }.validate().is_err());
    }
}
