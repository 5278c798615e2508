//! Corpus-level BLEU with selectable brevity-penalty and case
//! conventions, and paired bootstrap resampling for significance tests.
//!
//! Scoring operates on whitespace-tokenized text; per-sentence statistics
//! are additive, so corpus scores reduce over sentences in any order.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

const MAX_ORDER: usize = 4;

/// Reference against which the brevity penalty is measured:
/// `Shortest` is the NIST convention, `Closest` the IBM one.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BpMode {
    Shortest,
    Closest,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CaseMode {
    Sensitive,
    Insensitive,
}

/// Additive per-sentence BLEU sufficient statistics.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct BleuStats {
    pub matches: [u64; MAX_ORDER],
    pub candidates: [u64; MAX_ORDER],
    pub hyp_len: u64,
    pub ref_len: u64,
}

impl std::ops::Add for BleuStats {
    type Output = BleuStats;
    fn add(mut self, rhs: BleuStats) -> BleuStats {
        for n in 0..MAX_ORDER {
            self.matches[n] += rhs.matches[n];
            self.candidates[n] += rhs.candidates[n];
        }
        self.hyp_len += rhs.hyp_len;
        self.ref_len += rhs.ref_len;
        self
    }
}

/// Corpus score plus the pieces of the standard report line.
#[derive(Debug, Clone)]
pub struct BleuScore {
    /// Percentage in [0, 100].
    pub score: f64,
    pub brevity_penalty: f64,
    pub ratio: f64,
    pub hyp_len: u64,
    pub ref_len: u64,
    pub precisions: [f64; MAX_ORDER],
}

impl BleuScore {
    pub fn report_line(&self) -> String {
        format!(
            "BLEU = {:.2} (BP={:.3}, ratio={:.3}, hyp_len={}, ref_len={})",
            self.score, self.brevity_penalty, self.ratio, self.hyp_len, self.ref_len
        )
    }
}

#[derive(Debug, Clone)]
pub struct SignificanceResult {
    pub p_value: f64,
    pub n_resamples: usize,
    /// Corpus BLEU of system A minus system B on the full test set.
    pub score_difference: f64,
}

fn tokenize(line: &str, case: CaseMode) -> Vec<String> {
    line.split_whitespace()
        .map(|t| match case {
            CaseMode::Sensitive => t.to_string(),
            CaseMode::Insensitive => t.to_lowercase(),
        })
        .collect()
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], u64> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

/// Clipped-match statistics of one hypothesis against its references.
pub fn sentence_stats(hyp: &str, refs: &[String], bp_mode: BpMode, case: CaseMode) -> Result<BleuStats> {
    if refs.is_empty() {
        return Err(Error::Arg("empty reference set".into()));
    }
    let hyp_toks = tokenize(hyp, case);
    let ref_toks: Vec<Vec<String>> = refs.iter().map(|r| tokenize(r, case)).collect();

    let hyp_len = hyp_toks.len() as u64;
    let ref_len = match bp_mode {
        BpMode::Shortest => ref_toks.iter().map(|r| r.len()).min().unwrap() as u64,
        BpMode::Closest => {
            let mut best = ref_toks[0].len();
            for r in &ref_toks[1..] {
                let (dl, db) = (
                    (r.len() as i64 - hyp_len as i64).abs(),
                    (best as i64 - hyp_len as i64).abs(),
                );
                // ties go to the shorter reference
                if dl < db || (dl == db && r.len() < best) {
                    best = r.len();
                }
            }
            best as u64
        }
    };

    let mut stats = BleuStats { hyp_len, ref_len, ..Default::default() };
    for n in 1..=MAX_ORDER {
        let hyp_counts = ngram_counts(&hyp_toks, n);
        let mut max_ref: HashMap<&[String], u64> = HashMap::new();
        for r in &ref_toks {
            for (gram, c) in ngram_counts(r, n) {
                let e = max_ref.entry(gram).or_insert(0);
                *e = (*e).max(c);
            }
        }
        let mut matches = 0;
        let mut cands = 0;
        for (gram, c) in hyp_counts {
            cands += c;
            matches += c.min(*max_ref.get(gram).unwrap_or(&0));
        }
        stats.matches[n - 1] = matches;
        stats.candidates[n - 1] = cands;
    }
    Ok(stats)
}

/// Turn accumulated statistics into a corpus score. Zero matches at any
/// order give a zero score (no smoothing).
pub fn score_from_stats(stats: &BleuStats) -> BleuScore {
    let mut precisions = [0.0; MAX_ORDER];
    let mut log_sum = 0.0;
    let mut orders = 0usize;
    let mut degenerate = false;
    for n in 0..MAX_ORDER {
        if stats.candidates[n] == 0 {
            // corpus shorter than this order: drop it from the geometric
            // mean (effective-order convention) instead of zeroing out
            continue;
        }
        orders += 1;
        if stats.matches[n] == 0 {
            degenerate = true;
        } else {
            precisions[n] = stats.matches[n] as f64 / stats.candidates[n] as f64;
            log_sum += precisions[n].ln();
        }
    }
    let bp = if stats.hyp_len == 0 {
        0.0
    } else if stats.hyp_len > stats.ref_len {
        1.0
    } else {
        (1.0 - stats.ref_len as f64 / stats.hyp_len as f64).exp()
    };
    let score = if degenerate || orders == 0 || stats.hyp_len == 0 {
        0.0
    } else {
        100.0 * bp * (log_sum / orders as f64).exp()
    };
    BleuScore {
        score,
        brevity_penalty: bp,
        ratio: if stats.ref_len == 0 { 0.0 } else { stats.hyp_len as f64 / stats.ref_len as f64 },
        hyp_len: stats.hyp_len,
        ref_len: stats.ref_len,
        precisions,
    }
}

/// Corpus BLEU of `hyps` against line-aligned reference sets.
pub fn bleu(hyps: &[String], refsets: &[Vec<String>], bp_mode: BpMode, case: CaseMode) -> Result<BleuScore> {
    if hyps.len() != refsets.len() {
        return Err(Error::Dim(format!(
            "{} hypotheses vs {} reference sets",
            hyps.len(),
            refsets.len()
        )));
    }
    if hyps.is_empty() {
        return Err(Error::Arg("empty corpus".into()));
    }
    let mut total = BleuStats::default();
    for (h, rs) in hyps.iter().zip(refsets) {
        total = total + sentence_stats(h, rs, bp_mode, case)?;
    }
    Ok(score_from_stats(&total))
}

/// Paired bootstrap: resample sentence indices with replacement and count
/// how often system B scores at least as high as system A (the putative
/// winner). Deterministic per seed.
pub fn bootstrap_significance(
    hyps_a: &[String],
    hyps_b: &[String],
    refsets: &[Vec<String>],
    n_resamples: usize,
    seed: u64,
    bp_mode: BpMode,
    case: CaseMode,
) -> Result<SignificanceResult> {
    if hyps_a.len() != hyps_b.len() || hyps_a.len() != refsets.len() {
        return Err(Error::Dim("misaligned systems/references".into()));
    }
    if hyps_a.is_empty() {
        return Err(Error::Arg("empty corpus".into()));
    }
    if n_resamples < 100 {
        return Err(Error::Arg("need at least 100 resamples".into()));
    }
    let stats_a: Vec<BleuStats> = hyps_a
        .iter()
        .zip(refsets)
        .map(|(h, r)| sentence_stats(h, r, bp_mode, case))
        .collect::<Result<_>>()?;
    let stats_b: Vec<BleuStats> = hyps_b
        .iter()
        .zip(refsets)
        .map(|(h, r)| sentence_stats(h, r, bp_mode, case))
        .collect::<Result<_>>()?;

    let full_a = score_from_stats(&stats_a.iter().fold(BleuStats::default(), |acc, s| acc + *s));
    let full_b = score_from_stats(&stats_b.iter().fold(BleuStats::default(), |acc, s| acc + *s));

    let n = stats_a.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut b_wins = 0usize;
    for _ in 0..n_resamples {
        let mut acc_a = BleuStats::default();
        let mut acc_b = BleuStats::default();
        for _ in 0..n {
            let i = rng.gen_range(0..n);
            acc_a = acc_a + stats_a[i];
            acc_b = acc_b + stats_b[i];
        }
        if score_from_stats(&acc_b).score >= score_from_stats(&acc_a).score {
            b_wins += 1;
        }
    }
    Ok(SignificanceResult {
        p_value: b_wins as f64 / n_resamples as f64,
        n_resamples,
        score_difference: full_a.score - full_b.score,
    })
}
