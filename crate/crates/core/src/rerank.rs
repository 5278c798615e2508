//! K-best re-ranking: re-score translation hypotheses with a language
//! model and a word-count feature, and tune the feature weights by grid
//! search on development BLEU.

use crate::bpe::SubwordToken;
use crate::decoding::{join_subwords, KBestEntry, KBestList};
use crate::error::{Error, Result};
use crate::eval::{bleu, BpMode, CaseMode};
use crate::lm::{InterpolatedLM, NGramLM};

/// Anything that can assign a log-probability to a tokenized sentence.
pub trait LmScorer {
    fn logprob(&self, words: &[String]) -> f64;
}

impl LmScorer for NGramLM {
    fn logprob(&self, words: &[String]) -> f64 {
        self.sentence_logprob(words)
    }
}

impl LmScorer for InterpolatedLM {
    fn logprob(&self, words: &[String]) -> f64 {
        self.sentence_logprob(words)
    }
}

/// Linear feature weights for re-ranking. The total hypothesis score is
/// `nmt * nmt_score + lm * lm_logprob + len * word_count`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RerankWeights {
    pub nmt: f64,
    pub lm: f64,
    pub len: f64,
}

impl RerankWeights {
    /// Leaves the decoder's ranking untouched.
    pub fn identity() -> Self {
        RerankWeights { nmt: 1.0, lm: 0.0, len: 0.0 }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.nmt.is_finite() && self.lm.is_finite() && self.len.is_finite()) {
            return Err(Error::Arg("re-ranking weights must be finite".into()));
        }
        if self.nmt == 0.0 && self.lm == 0.0 && self.len == 0.0 {
            return Err(Error::Arg("at least one re-ranking weight must be nonzero".into()));
        }
        Ok(())
    }
}

/// Words of one hypothesis after undoing the subword segmentation.
pub fn entry_words(entry: &KBestEntry) -> Vec<String> {
    let toks: Vec<SubwordToken> = entry.tokens.iter().map(|t| SubwordToken::from_marked(t)).collect();
    join_subwords(&toks)
}

fn total_score(entry: &KBestEntry, lm: &dyn LmScorer, w: RerankWeights) -> f64 {
    let words = entry_words(entry);
    w.nmt * entry.score + w.lm * lm.logprob(&words) + w.len * words.len() as f64
}

/// Stable re-sort of every sentence's hypotheses by the weighted total
/// score, descending. Entries themselves are left untouched, so identity
/// weights reproduce the input exactly.
pub fn rerank(kbest: &KBestList, lm: &dyn LmScorer, w: RerankWeights) -> Result<KBestList> {
    w.validate()?;
    let mut out = KBestList::default();
    for entries in &kbest.sentences {
        let mut scored: Vec<(f64, &KBestEntry)> =
            entries.iter().map(|e| (total_score(e, lm, w), e)).collect();
        scored.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap_or(std::cmp::Ordering::Equal));
        out.sentences.push(scored.into_iter().map(|(_, e)| e.clone()).collect());
    }
    Ok(out)
}

/// Copy of the list with the re-scoring features (LM log-probability and
/// word count) appended to every entry, for the disk artifact.
pub fn append_features(kbest: &KBestList, lm: &dyn LmScorer) -> KBestList {
    let mut out = kbest.clone();
    for entries in &mut out.sentences {
        for e in entries.iter_mut() {
            let words = entry_words(e);
            e.features = vec![lm.logprob(&words), words.len() as f64];
        }
    }
    out
}

/// Top-1 detokenized line per sentence (empty when no hypothesis
/// survived).
pub fn top_lines(kbest: &KBestList) -> Vec<String> {
    kbest
        .sentences
        .iter()
        .map(|entries| entries.first().map(|e| entry_words(e).join(" ")).unwrap_or_default())
        .collect()
}

/// The weight lattice evaluated by [`tune_rerank_weights`]: the NMT
/// weight is pinned to 1, the LM weight ranges over [0, 1] in steps of
/// 0.1 and the length weight over [-0.6, 0.6] in steps of 0.2, with the
/// identity point enumerated first.
pub fn weight_lattice() -> Vec<RerankWeights> {
    let mut points = vec![RerankWeights::identity()];
    for lm_i in 0..=10 {
        for len_i in -3..=3 {
            let w = RerankWeights { nmt: 1.0, lm: lm_i as f64 * 0.1, len: len_i as f64 * 0.2 };
            if w != RerankWeights::identity() {
                points.push(w);
            }
        }
    }
    points
}

/// Grid search over [`weight_lattice`] maximizing development BLEU of the
/// re-ranked top-1 output. Ties (including the all-identical degenerate
/// case) resolve to the earliest lattice point, i.e. toward the identity
/// weights.
pub fn tune_rerank_weights(
    kbest: &KBestList,
    references: &[String],
    lm: &dyn LmScorer,
    bp_mode: BpMode,
    case: CaseMode,
) -> Result<(RerankWeights, f64)> {
    if kbest.sentences.len() != references.len() {
        return Err(Error::Dim(format!(
            "{} k-best sentences vs {} references",
            kbest.sentences.len(),
            references.len()
        )));
    }
    let refsets: Vec<Vec<String>> = references.iter().map(|r| vec![r.clone()]).collect();
    let mut best: Option<(RerankWeights, f64)> = None;
    for w in weight_lattice() {
        let ranked = rerank(kbest, lm, w)?;
        let score = bleu(&top_lines(&ranked), &refsets, bp_mode, case)?.score;
        if best.as_ref().map_or(true, |(_, b)| score > *b) {
            best = Some((w, score));
        }
    }
    Ok(best.expect("lattice is non-empty"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lm::train_lm;

    fn entry(tokens: &[&str], score: f64) -> KBestEntry {
        KBestEntry { tokens: tokens.iter().map(|t| t.to_string()).collect(), score, features: vec![] }
    }

    /// Scorer with fixed per-sentence values for hand arithmetic.
    struct TableLm;
    impl LmScorer for TableLm {
        fn logprob(&self, words: &[String]) -> f64 {
            match words.join(" ").as_str() {
                "a b c d" => -1.0,   // "good"
                "a b c x" => -2.0,   // "middling"
                "x y z w q" => -8.0, // "bad"
                _ => -5.0,
            }
        }
    }

    fn three_entry_list() -> KBestList {
        KBestList {
            sentences: vec![vec![
                entry(&["x", "y", "z", "w", "q"], -0.1),
                entry(&["a", "b", "c", "x"], -0.2),
                entry(&["a", "b", "c", "d"], -0.3),
            ]],
        }
    }

    #[test]
    fn identity_weights_leave_order_and_entries_untouched() {
        let list = three_entry_list();
        let lm = train_lm(&["a b c d".to_string()], 2).unwrap();
        let out = rerank(&list, &lm, RerankWeights::identity()).unwrap();
        assert_eq!(out, list);
    }

    #[test]
    fn pure_lm_weights_sort_by_lm_score() {
        let list = three_entry_list();
        let w = RerankWeights { nmt: 0.0, lm: 1.0, len: 0.0 };
        let out = rerank(&list, &TableLm, w).unwrap();
        let lasts: Vec<&str> = out.sentences[0].iter().map(|e| e.tokens.last().unwrap().as_str()).collect();
        assert_eq!(lasts, vec!["d", "x", "q"]);
    }

    #[test]
    fn hand_computed_totals_determine_order() {
        // weights (1, 0.1, 0.05):
        //   bad:      -0.1 + 0.1*(-8) + 0.05*5 = -0.65
        //   middling: -0.2 + 0.1*(-2) + 0.05*4 = -0.20
        //   good:     -0.3 + 0.1*(-1) + 0.05*4 = -0.20  (tie, stable: middling first)
        let list = three_entry_list();
        let w = RerankWeights { nmt: 1.0, lm: 0.1, len: 0.05 };
        let out = rerank(&list, &TableLm, w).unwrap();
        let lasts: Vec<&str> = out.sentences[0].iter().map(|e| e.tokens.last().unwrap().as_str()).collect();
        assert_eq!(lasts, vec!["x", "d", "q"]);
    }

    #[test]
    fn rerank_is_a_permutation() {
        let list = three_entry_list();
        let w = RerankWeights { nmt: 0.3, lm: 0.7, len: -0.2 };
        let out = rerank(&list, &TableLm, w).unwrap();
        let mut a: Vec<String> = list.sentences[0].iter().map(|e| e.tokens.join(" ")).collect();
        let mut b: Vec<String> = out.sentences[0].iter().map(|e| e.tokens.join(" ")).collect();
        a.sort();
        b.sort();
        assert_eq!(a, b);
    }

    #[test]
    fn all_zero_weights_rejected() {
        let w = RerankWeights { nmt: 0.0, lm: 0.0, len: 0.0 };
        assert!(rerank(&three_entry_list(), &TableLm, w).is_err());
        assert!(RerankWeights { nmt: f64::NAN, lm: 0.0, len: 1.0 }.validate().is_err());
    }

    #[test]
    fn subword_entries_detokenize_before_scoring() {
        let e = entry(&["mid@@", "dling", "two"], -0.5);
        assert_eq!(entry_words(&e), vec!["middling", "two"]);
    }

    #[test]
    fn tuning_never_beats_nor_loses_to_oracle_rank_one() {
        // rank-1 hypotheses already equal the references: BLEU is maximal,
        // so tuning must keep it and tie-break to the identity weights
        let list = KBestList {
            sentences: vec![
                vec![entry(&["a", "b", "c", "d"], -0.1), entry(&["x", "y", "z", "w", "q"], -0.4)],
                vec![entry(&["a", "b", "c", "x"], -0.2), entry(&["a", "b", "c", "d"], -0.9)],
            ],
        };
        let refs = vec!["a b c d".to_string(), "a b c x".to_string()];
        let (w, score) =
            tune_rerank_weights(&list, &refs, &TableLm, BpMode::Shortest, CaseMode::Sensitive).unwrap();
        assert_eq!(w, RerankWeights::identity());
        assert!((score - 100.0).abs() < 1e-9);
    }

    #[test]
    fn tuning_finds_weights_that_fix_a_bad_ranking() {
        // decoder prefers the wrong hypothesis; the LM prefers the right
        // one, so some lattice point must recover it
        let list = KBestList {
            sentences: vec![vec![
                entry(&["x", "y", "z", "w", "q"], -0.10),
                entry(&["a", "b", "c", "d"], -0.11),
            ]],
        };
        let refs = vec!["a b c d".to_string()];
        let identity_score = {
            let ranked = rerank(&list, &TableLm, RerankWeights::identity()).unwrap();
            bleu(&top_lines(&ranked), &[vec![refs[0].clone()]], BpMode::Shortest, CaseMode::Sensitive)
                .unwrap()
                .score
        };
        let (w, score) =
            tune_rerank_weights(&list, &refs, &TableLm, BpMode::Shortest, CaseMode::Sensitive).unwrap();
        assert!(score >= identity_score);
        assert!(score > 0.0);
        assert!(w.lm > 0.0 || w.len != 0.0);
    }

    #[test]
    fn degenerate_identical_hypotheses_return_identity() {
        let list = KBestList {
            sentences: vec![vec![entry(&["a", "b", "c", "d"], -0.2), entry(&["a", "b", "c", "d"], -0.2)]],
        };
        let refs = vec!["something else entirely here".to_string()];
        let (w, _) =
            tune_rerank_weights(&list, &refs, &TableLm, BpMode::Shortest, CaseMode::Sensitive).unwrap();
        assert_eq!(w, RerankWeights::identity());
    }

    #[test]
    fn features_are_appended_without_reordering() {
        let list = three_entry_list();
        let out = append_features(&list, &TableLm);
        assert_eq!(out.sentences[0][0].tokens, list.sentences[0][0].tokens);
        assert_eq!(out.sentences[0][2].features, vec![-1.0, 4.0]);
    }
}
