//! Byte-level BPE.
//!
//! Ids `0..256` are raw bytes, so every input is encodable. Merge `i` creates
//! id `256 + i`. Text is first cut into chunks (a word, a punctuation run, or
//! a whitespace run, with a single leading space glued onto the following
//! word or punctuation run) and merges never cross chunk boundaries.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt::Write as _;
use std::path::Path;

use super::SegmentError;

pub const BYTE_ALPHABET: usize = 256;
const VOCAB_HEADER: &str = "#bpe-merges v1";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BpeVocab {
    merges: Vec<(u32, u32)>,
    ranks: HashMap<(u32, u32), u32>,
    pieces: Vec<Vec<u8>>,
}

impl BpeVocab {
    fn from_merges(merges: Vec<(u32, u32)>) -> Result<Self, SegmentError> {
        let mut pieces: Vec<Vec<u8>> = (0..=255u8).map(|b| vec![b]).collect();
        let mut ranks = HashMap::with_capacity(merges.len());
        for (rank, &(l, r)) in merges.iter().enumerate() {
            let (li, ri) = (l as usize, r as usize);
            if li >= pieces.len() || ri >= pieces.len() {
                return Err(SegmentError::Vocab(format!(
                    "merge {rank} refers to an id not yet defined"
                )));
            }
            let mut piece = pieces[li].clone();
            piece.extend_from_slice(&pieces[ri]);
            pieces.push(piece);
            if ranks.insert((l, r), rank as u32).is_some() {
                return Err(SegmentError::Vocab(format!("merge {rank} is a duplicate")));
            }
        }
        Ok(Self {
            merges,
            ranks,
            pieces,
        })
    }

    /// Total number of ids (bytes plus merges).
    pub fn len(&self) -> usize {
        self.pieces.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn num_merges(&self) -> usize {
        self.merges.len()
    }

    /// Merge rules in learned order, as byte strings.
    pub fn merge_pieces(&self) -> impl Iterator<Item = (&[u8], &[u8])> + '_ {
        self.merges
            .iter()
            .map(|&(l, r)| (self.pieces[l as usize].as_slice(), self.pieces[r as usize].as_slice()))
    }

    pub fn piece(&self, id: u32) -> Option<&[u8]> {
        self.pieces.get(id as usize).map(Vec::as_slice)
    }

    pub fn encode(&self, text: &str) -> Vec<u32> {
        let mut ids = Vec::new();
        for chunk in pre_tokenize(text.as_bytes()) {
            ids.extend(self.encode_chunk(chunk));
        }
        ids
    }

    fn encode_chunk(&self, chunk: &[u8]) -> Vec<u32> {
        let mut syms: Vec<u32> = chunk.iter().map(|&b| b as u32).collect();
        while syms.len() > 1 {
            let best = syms
                .windows(2)
                .filter_map(|w| self.ranks.get(&(w[0], w[1])).map(|&r| (r, (w[0], w[1]))))
                .min();
            let Some((rank, pair)) = best else { break };
            syms = merge_pair(&syms, pair, BYTE_ALPHABET as u32 + rank);
        }
        syms
    }

    pub fn decode_bytes(&self, ids: &[u32]) -> Option<Vec<u8>> {
        let mut out = Vec::new();
        for &id in ids {
            out.extend_from_slice(self.piece(id)?);
        }
        Some(out)
    }

    /// Inverse of [`BpeVocab::encode`]; lossy only if `ids` splits a UTF-8
    /// sequence in a way no encoding would.
    pub fn decode(&self, ids: &[u32]) -> Option<String> {
        self.decode_bytes(ids)
            .map(|b| String::from_utf8_lossy(&b).into_owned())
    }

    /// Text form: a header line, then one merge per line as two escaped
    /// pieces separated by a single space.
    pub fn to_text(&self) -> String {
        let mut s = String::from(VOCAB_HEADER);
        s.push('\n');
        for (l, r) in self.merge_pieces() {
            escape_into(&mut s, l);
            s.push(' ');
            escape_into(&mut s, r);
            s.push('\n');
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self, SegmentError> {
        let mut lines = text.lines();
        if lines.next() != Some(VOCAB_HEADER) {
            return Err(SegmentError::Vocab("missing header line".into()));
        }
        let mut by_piece: HashMap<Vec<u8>, u32> =
            (0..=255u8).map(|b| (vec![b], b as u32)).collect();
        let mut merges = Vec::new();
        for (no, line) in lines.enumerate() {
            let bad = |what: &str| SegmentError::Vocab(format!("line {}: {what}", no + 2));
            let (l, r) = line.split_once(' ').ok_or_else(|| bad("expected two pieces"))?;
            let (l, r) = (
                unescape(l).ok_or_else(|| bad("bad escape"))?,
                unescape(r).ok_or_else(|| bad("bad escape"))?,
            );
            let li = *by_piece.get(&l).ok_or_else(|| bad("unknown left piece"))?;
            let ri = *by_piece.get(&r).ok_or_else(|| bad("unknown right piece"))?;
            let mut joined = l;
            joined.extend_from_slice(&r);
            if by_piece
                .insert(joined, (BYTE_ALPHABET + merges.len()) as u32)
                .is_some()
            {
                return Err(bad("merge repeats an existing piece"));
            }
            merges.push((li, ri));
        }
        Self::from_merges(merges)
    }

    pub fn save(&self, path: &Path) -> Result<(), SegmentError> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, SegmentError> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }
}

/// Learns merges greedily by pair frequency until the vocabulary holds
/// `vocab_size` ids. Ties go to the lexicographically smallest pair of byte
/// strings. Stops early, with a warning, when no pair is left to merge.
pub fn train_bpe<S: AsRef<str>>(corpus: &[S], vocab_size: usize) -> Result<BpeVocab, SegmentError> {
    if corpus.iter().all(|t| t.as_ref().is_empty()) {
        return Err(SegmentError::EmptyCorpus);
    }
    if vocab_size <= BYTE_ALPHABET {
        return Err(SegmentError::VocabTooSmall {
            requested: vocab_size,
            alphabet: BYTE_ALPHABET,
        });
    }
    let mut word_counts: BTreeMap<&[u8], usize> = BTreeMap::new();
    for text in corpus {
        for chunk in pre_tokenize(text.as_ref().as_bytes()) {
            *word_counts.entry(chunk).or_default() += 1;
        }
    }
    let mut words: Vec<(Vec<u32>, usize)> = word_counts
        .into_iter()
        .map(|(w, c)| (w.iter().map(|&b| b as u32).collect(), c))
        .collect();
    let mut pieces: Vec<Vec<u8>> = (0..=255u8).map(|b| vec![b]).collect();
    let mut merges = Vec::new();
    let mut known: HashSet<Vec<u8>> = pieces.iter().cloned().collect();
    let mut banned: HashSet<(u32, u32)> = HashSet::new();
    while BYTE_ALPHABET + merges.len() < vocab_size {
        let mut counts: HashMap<(u32, u32), usize> = HashMap::new();
        for (syms, c) in &words {
            for w in syms.windows(2) {
                *counts.entry((w[0], w[1])).or_default() += c;
            }
        }
        counts.retain(|pair, _| !banned.contains(pair));
        let top = counts.values().copied().max().unwrap_or(0);
        let best = counts
            .into_iter()
            .filter(|&(_, c)| c == top)
            .map(|(pair, _)| pair)
            .min_by(|a, b| {
                let key = |&(l, r): &(u32, u32)| (&pieces[l as usize], &pieces[r as usize]);
                key(a).cmp(&key(b))
            });
        let Some((l, r)) = best else {
            log::warn!(
                "BPE corpus exhausted after {} merges (requested vocabulary {vocab_size})",
                merges.len()
            );
            break;
        };
        let mut piece = pieces[l as usize].clone();
        piece.extend_from_slice(&pieces[r as usize]);
        // Two merge paths can spell the same string ("aa"+"a" vs "a"+"aa").
        // Keeping pieces unique keeps the text vocabulary unambiguous.
        if known.contains(&piece) {
            banned.insert((l, r));
            continue;
        }
        let new_id = (BYTE_ALPHABET + merges.len()) as u32;
        for (syms, _) in words.iter_mut() {
            if syms.len() > 1 {
                *syms = merge_pair(syms, (l, r), new_id);
            }
        }
        known.insert(piece.clone());
        pieces.push(piece);
        merges.push((l, r));
    }
    BpeVocab::from_merges(merges)
}

fn merge_pair(syms: &[u32], pair: (u32, u32), new_id: u32) -> Vec<u32> {
    let mut out = Vec::with_capacity(syms.len());
    let mut i = 0;
    while i < syms.len() {
        if i + 1 < syms.len() && (syms[i], syms[i + 1]) == pair {
            out.push(new_id);
            i += 2;
        } else {
            out.push(syms[i]);
            i += 1;
        }
    }
    out
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Class {
    Word,
    Space,
    Punct,
}

fn class(b: u8) -> Class {
    if b.is_ascii_alphanumeric() || b == b'_' || b >= 0x80 {
        Class::Word
    } else if b.is_ascii_whitespace() {
        Class::Space
    } else {
        Class::Punct
    }
}

/// Splits bytes into merge-isolated chunks; concatenating them gives the
/// input back.
pub fn pre_tokenize(bytes: &[u8]) -> Vec<&[u8]> {
    let mut chunks = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        let start = i;
        let cls = class(bytes[i]);
        if cls == Class::Space {
            let mut j = i;
            while j < bytes.len() && class(bytes[j]) == Class::Space {
                j += 1;
            }
            // Leave a trailing ' ' to prefix the next word or punctuation run.
            if j < bytes.len() && bytes[j - 1] == b' ' {
                if j - 1 > start {
                    chunks.push(&bytes[start..j - 1]);
                }
                i = j - 1;
                let body = class(bytes[j]);
                let mut k = j;
                while k < bytes.len() && class(bytes[k]) == body {
                    k += 1;
                }
                chunks.push(&bytes[i..k]);
                i = k;
            } else {
                chunks.push(&bytes[start..j]);
                i = j;
            }
        } else {
            while i < bytes.len() && class(bytes[i]) == cls {
                i += 1;
            }
            chunks.push(&bytes[start..i]);
        }
    }
    chunks
}

fn escape_into(out: &mut String, piece: &[u8]) {
    for &b in piece {
        if b.is_ascii_graphic() && b != b'\\' {
            out.push(b as char);
        } else {
            let _ = write!(out, "\\x{b:02x}");
        }
    }
}

fn unescape(s: &str) -> Option<Vec<u8>> {
    let bytes = s.as_bytes();
    let mut out = Vec::with_capacity(bytes.len());
    let mut i = 0;
    while i < bytes.len() {
        if bytes[i] == b'\\' {
            if bytes.get(i + 1) != Some(&b'x') {
                return None;
            }
            let hex = s.get(i + 2..i + 4)?;
            out.push(u8::from_str_radix(hex, 16).ok()?);
            i += 4;
        } else {
            out.push(bytes[i]);
            i += 1;
        }
    }
    (!out.is_empty()).then_some(out)
}
