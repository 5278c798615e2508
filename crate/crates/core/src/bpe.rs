//! Byte-pair-encoding subword learner and applier, with the inverse
//! needed to score word-level output.
//!
//! Merges are learned per side from word frequencies: the most frequent
//! adjacent symbol pair inside words is merged repeatedly, never across
//! word boundaries, with ties broken lexicographically. On disk the
//! continuation flag uses the conventional trailing `@@` marker.

use std::collections::HashMap;
use std::fmt::Write as _;

use crate::error::{Error, Result};

/// Ordered merge operations, most frequent first.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct MergeList {
    pub merges: Vec<(String, String)>,
}

/// One subword; `continuation` is true when the original word continues
/// after this token.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct SubwordToken {
    pub text: String,
    pub continuation: bool,
}

impl SubwordToken {
    pub fn new(text: impl Into<String>, continuation: bool) -> Self {
        SubwordToken { text: text.into(), continuation }
    }

    /// Disk form: continuation marked with a trailing `@@`.
    pub fn marked(&self) -> String {
        if self.continuation {
            format!("{}@@", self.text)
        } else {
            self.text.clone()
        }
    }

    pub fn from_marked(s: &str) -> Self {
        match s.strip_suffix("@@") {
            Some(stem) => SubwordToken::new(stem, true),
            None => SubwordToken::new(s, false),
        }
    }
}

fn split_chars(word: &str) -> Vec<String> {
    word.chars().map(|c| c.to_string()).collect()
}

/// Learn up to `n_merges` merge operations from word frequencies.
/// Returns fewer when the vocabulary runs out of mergeable pairs.
pub fn learn_bpe(word_freqs: &HashMap<String, u64>, n_merges: usize) -> Result<MergeList> {
    if word_freqs.is_empty() {
        return Err(Error::Arg("empty vocabulary".into()));
    }
    // sorted for deterministic iteration regardless of hash order
    let mut words: Vec<(Vec<String>, u64)> = {
        let mut ws: Vec<(&String, &u64)> = word_freqs.iter().collect();
        ws.sort();
        ws.into_iter().map(|(w, &c)| (split_chars(w), c)).collect()
    };

    let mut merges = Vec::with_capacity(n_merges);
    for _ in 0..n_merges {
        let mut pair_counts: HashMap<(String, String), u64> = HashMap::new();
        for (syms, count) in &words {
            for win in syms.windows(2) {
                *pair_counts.entry((win[0].clone(), win[1].clone())).or_insert(0) += count;
            }
        }
        // highest frequency, ties broken lexicographically by (left, right)
        let best = pair_counts
            .into_iter()
            .max_by(|(pa, ca), (pb, cb)| ca.cmp(cb).then_with(|| pb.cmp(pa)));
        let (pair, _) = match best {
            Some(b) => b,
            None => break,
        };
        for (syms, _) in &mut words {
            merge_in_place(syms, &pair);
        }
        merges.push(pair);
    }
    Ok(MergeList { merges })
}

fn merge_in_place(syms: &mut Vec<String>, pair: &(String, String)) {
    let mut i = 0;
    while i + 1 < syms.len() {
        if syms[i] == pair.0 && syms[i + 1] == pair.1 {
            let right = syms.remove(i + 1);
            syms[i].push_str(&right);
        } else {
            i += 1;
        }
    }
}

/// Segment one word by applying merges in list order.
pub fn apply_bpe_word(merges: &MergeList, word: &str) -> Vec<SubwordToken> {
    let mut syms = split_chars(word);
    if syms.is_empty() {
        return vec![];
    }
    for pair in &merges.merges {
        if syms.len() < 2 {
            break;
        }
        merge_in_place(&mut syms, pair);
    }
    let n = syms.len();
    syms.into_iter()
        .enumerate()
        .map(|(i, text)| SubwordToken { text, continuation: i + 1 < n })
        .collect()
}

/// Segment a word sequence.
pub fn apply_bpe(merges: &MergeList, words: &[String]) -> Vec<SubwordToken> {
    words.iter().flat_map(|w| apply_bpe_word(merges, w)).collect()
}

/// Exact inverse of [`apply_bpe`]: joins continuation runs back to words.
pub fn undo_bpe(tokens: &[SubwordToken]) -> Result<Vec<String>> {
    let mut words = Vec::new();
    let mut current = String::new();
    for tok in tokens {
        current.push_str(&tok.text);
        if !tok.continuation {
            words.push(std::mem::take(&mut current));
        }
    }
    if !current.is_empty() {
        return Err(Error::Format("trailing continuation token".into()));
    }
    Ok(words)
}

/// Merge file: one `left right` pair per line, learn order, with a
/// version comment header.
pub fn merges_to_string(merges: &MergeList) -> String {
    let mut out = String::from("#version: 1\n");
    for (l, r) in &merges.merges {
        let _ = writeln!(out, "{} {}", l, r);
    }
    out
}

pub fn merges_from_string(s: &str) -> Result<MergeList> {
    let mut merges = Vec::new();
    for (lineno, line) in s.lines().enumerate() {
        let line = line.trim_end();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut it = line.splitn(2, ' ');
        let (l, r) = match (it.next(), it.next()) {
            (Some(l), Some(r)) if !l.is_empty() && !r.is_empty() => (l, r),
            _ => {
                return Err(Error::Format(format!("merge file line {}: expected 'left right'", lineno + 1)));
            }
        };
        merges.push((l.to_string(), r.to_string()));
    }
    Ok(MergeList { merges })
}

/// Space-separated disk form of a subword sentence.
pub fn tokens_to_line(tokens: &[SubwordToken]) -> String {
    tokens.iter().map(|t| t.marked()).collect::<Vec<_>>().join(" ")
}

pub fn tokens_from_line(line: &str) -> Vec<SubwordToken> {
    line.split_whitespace().map(SubwordToken::from_marked).collect()
}
