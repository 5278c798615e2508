//! Beam-search translation with multi-model ensembling and k-best list
//! production.
//!
//! An ensemble combines members by the arithmetic mean of their per-step
//! log-probabilities (a geometric mean over probabilities), renormalized
//! with a log-sum-exp subtraction. Final hypotheses are ranked by the
//! length-normalized score: cumulative log-probability divided by the
//! number of emitted tokens (end-of-sentence included).

use crate::bpe::{self, MergeList, SubwordToken};
use crate::error::{Error, Result};
use crate::model::{BoundModel, DecoderState, ModelConfig, ModelParams, BOS_ID, EOS_ID};
use crate::pipeline::Vocab;
use crate::tensor::{log_softmax_raw, Tape};

/// The models that decode jointly. All members must share the target
/// vocabulary (they are trained on the same subword merges).
pub struct EnsembleSpec {
    pub members: Vec<(ModelParams, ModelConfig)>,
}

impl EnsembleSpec {
    pub fn new(members: Vec<(ModelParams, ModelConfig)>) -> Result<Self> {
        if members.is_empty() {
            return Err(Error::Arg("ensemble needs at least one member".into()));
        }
        let (src, tgt) = (members[0].1.src_vocab, members[0].1.tgt_vocab);
        for (_, cfg) in &members {
            if cfg.src_vocab != src || cfg.tgt_vocab != tgt {
                return Err(Error::Vocab("ensemble members disagree on vocabulary sizes".into()));
            }
        }
        Ok(EnsembleSpec { members })
    }

    pub fn tgt_vocab(&self) -> usize {
        self.members[0].1.tgt_vocab
    }
}

/// A partial translation on the beam.
#[derive(Debug, Clone)]
pub struct Hypothesis {
    /// Emitted target ids; ends with the end-of-sentence id once finished.
    pub tokens: Vec<usize>,
    /// Sum of the chosen per-step combined log-probabilities.
    pub logprob: f64,
    pub finished: bool,
    /// One decoder state per ensemble member.
    pub states: Vec<DecoderState>,
}

impl Hypothesis {
    /// Cumulative log-probability divided by token count.
    pub fn normalized_score(&self) -> f64 {
        if self.tokens.is_empty() {
            0.0
        } else {
            self.logprob / self.tokens.len() as f64
        }
    }
}

/// One ranked k-best entry: subword tokens in disk form (no
/// end-of-sentence marker), the translation-model score, and any feature
/// scores appended by a re-scorer.
#[derive(Debug, Clone, PartialEq)]
pub struct KBestEntry {
    pub tokens: Vec<String>,
    pub score: f64,
    pub features: Vec<f64>,
}

/// Ranked hypotheses per source sentence, scores non-increasing.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct KBestList {
    pub sentences: Vec<Vec<KBestEntry>>,
}

/// Live decoding state: one tape and annotation set per ensemble member
/// for a single source sentence.
pub struct DecodeSession<'a> {
    members: Vec<MemberSession<'a>>,
    tgt_vocab: usize,
}

struct MemberSession<'a> {
    tape: Tape,
    model: BoundModel<'a>,
    ann: crate::model::Annotations,
}

impl<'a> DecodeSession<'a> {
    pub fn new(spec: &'a EnsembleSpec, source_ids: &[usize]) -> Result<Self> {
        if source_ids.is_empty() {
            return Err(Error::Arg("empty source sentence".into()));
        }
        let mut members = Vec::with_capacity(spec.members.len());
        for (params, cfg) in &spec.members {
            let mut tape = Tape::new();
            let model = BoundModel::bind(&mut tape, params, cfg);
            let ann = model.encode(&mut tape, source_ids, None)?;
            members.push(MemberSession { tape, model, ann });
        }
        Ok(DecodeSession { members, tgt_vocab: spec.tgt_vocab() })
    }

    pub fn init_states(&mut self) -> Vec<DecoderState> {
        self.members
            .iter_mut()
            .map(|m| m.model.init_decoder_state(&mut m.tape))
            .collect()
    }
}

/// Advance every member one step on `y_prev` and combine their
/// distributions. Returns the new per-member states and the combined
/// log-distribution over the target vocabulary.
pub fn ensemble_step(
    session: &mut DecodeSession,
    y_prev: usize,
    states: &[DecoderState],
) -> Result<(Vec<DecoderState>, Vec<f64>)> {
    if states.len() != session.members.len() {
        return Err(Error::Dim(format!(
            "{} states for {} ensemble members",
            states.len(),
            session.members.len()
        )));
    }
    let mut new_states = Vec::with_capacity(states.len());
    let mut dists = Vec::with_capacity(states.len());
    for (m, st) in session.members.iter_mut().zip(states) {
        let out = m.model.decoder_step(&mut m.tape, y_prev, st, &m.ann)?;
        dists.push(log_softmax_raw(m.tape.value(out.logits).data()));
        new_states.push(out.state);
    }
    let combined = combine_logdists(&dists)?;
    debug_assert_eq!(combined.len(), session.tgt_vocab);
    Ok((new_states, combined))
}

/// Arithmetic mean of member log-distributions, renormalized so the
/// result is itself a log-distribution.
pub fn combine_logdists(dists: &[Vec<f64>]) -> Result<Vec<f64>> {
    let n = dists.len();
    if n == 0 {
        return Err(Error::Arg("no distributions to combine".into()));
    }
    let v = dists[0].len();
    if dists.iter().any(|d| d.len() != v) {
        return Err(Error::Vocab("member distributions differ in size".into()));
    }
    let mut mean = vec![0.0; v];
    for d in dists {
        for (m, &x) in mean.iter_mut().zip(d) {
            *m += x / n as f64;
        }
    }
    Ok(log_softmax_raw(&mean))
}

/// Standard beam search over the combined distribution. Hypotheses that
/// emit end-of-sentence retire to a finished pool; the search stops when
/// `beam_size` hypotheses have finished or the length cap
/// (`max_len_factor` times the source length) is reached. Returns the
/// top `k` by length-normalized score.
pub fn beam_search(
    spec: &EnsembleSpec,
    source_ids: &[usize],
    beam_size: usize,
    k: usize,
    max_len_factor: usize,
) -> Result<Vec<Hypothesis>> {
    if beam_size < 1 {
        return Err(Error::Arg("beam size must be at least 1".into()));
    }
    if k > beam_size {
        return Err(Error::Arg(format!("k = {} exceeds beam size {}", k, beam_size)));
    }
    let max_len = max_len_factor.max(1) * source_ids.len();
    let mut session = DecodeSession::new(spec, source_ids)?;
    let init = session.init_states();
    let mut live = vec![Hypothesis { tokens: vec![], logprob: 0.0, finished: false, states: init }];
    let mut finished: Vec<Hypothesis> = Vec::new();

    for _ in 0..max_len {
        // expand every live hypothesis over the full vocabulary
        let mut cands: Vec<(usize, usize, f64)> = Vec::new(); // (hyp, token, new logprob)
        let mut stepped: Vec<(Vec<DecoderState>, Vec<f64>)> = Vec::with_capacity(live.len());
        for (hi, hyp) in live.iter().enumerate() {
            let y_prev = hyp.tokens.last().copied().unwrap_or(BOS_ID);
            let (states, dist) = ensemble_step(&mut session, y_prev, &hyp.states)?;
            for (tok, &lp) in dist.iter().enumerate() {
                cands.push((hi, tok, hyp.logprob + lp));
            }
            stepped.push((states, dist));
        }
        // keep the beam_size best expansions (stable on score ties)
        cands.sort_by(|a, b| b.2.partial_cmp(&a.2).unwrap_or(std::cmp::Ordering::Equal));
        cands.truncate(beam_size);

        let mut next_live = Vec::new();
        for (hi, tok, logprob) in cands {
            let mut tokens = live[hi].tokens.clone();
            tokens.push(tok);
            let hyp = Hypothesis {
                tokens,
                logprob,
                finished: tok == EOS_ID,
                states: stepped[hi].0.clone(),
            };
            if hyp.finished {
                finished.push(hyp);
            } else {
                next_live.push(hyp);
            }
        }
        live = next_live;
        if finished.len() >= beam_size || live.is_empty() {
            break;
        }
    }
    // length cap hit with nothing finished: fall back to the unfinished beam
    let mut pool = if finished.is_empty() { live } else { finished };
    pool.sort_by(|a, b| {
        b.normalized_score()
            .partial_cmp(&a.normalized_score())
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    pool.truncate(k);
    Ok(pool)
}

/// Join subwords back into words, tolerating a dangling continuation at
/// the end of a model output.
pub fn join_subwords(tokens: &[SubwordToken]) -> Vec<String> {
    let mut words = Vec::new();
    let mut current = String::new();
    for t in tokens {
        current.push_str(&t.text);
        if !t.continuation {
            words.push(std::mem::take(&mut current));
        }
    }
    if !current.is_empty() {
        words.push(current);
    }
    words
}

/// Translate whitespace-tokenized source lines end to end: subword
/// segmentation, beam search, and subword undo. Returns one detokenized
/// line per input line plus the full k-best list. Empty lines pass
/// through empty.
pub fn translate_corpus(
    spec: &EnsembleSpec,
    merges: &MergeList,
    src_vocab: &Vocab,
    tgt_vocab: &Vocab,
    lines: &[String],
    beam_size: usize,
    k: usize,
    max_len_factor: usize,
) -> Result<(Vec<String>, KBestList)> {
    let mut translations = Vec::with_capacity(lines.len());
    let mut kbest = KBestList::default();
    for (lineno, line) in lines.iter().enumerate() {
        let words: Vec<String> = line.split_whitespace().map(str::to_string).collect();
        if words.is_empty() {
            translations.push(String::new());
            kbest.sentences.push(vec![]);
            continue;
        }
        let subwords = bpe::apply_bpe(merges, &words);
        let ids: Vec<usize> = subwords.iter().map(|t| src_vocab.id(&t.marked())).collect();
        let hyps = beam_search(spec, &ids, beam_size, k, max_len_factor)
            .map_err(|e| Error::Arg(format!("line {}: {}", lineno + 1, e)))?;
        let entries: Vec<KBestEntry> = hyps
            .iter()
            .map(|h| KBestEntry {
                tokens: h
                    .tokens
                    .iter()
                    .filter(|&&t| t != EOS_ID)
                    .map(|&t| tgt_vocab.token(t).to_string())
                    .collect(),
                score: h.normalized_score(),
                features: vec![],
            })
            .collect();
        let top = entries.first().map(|e| e.tokens.clone()).unwrap_or_default();
        let toks: Vec<SubwordToken> = top.iter().map(|s| SubwordToken::from_marked(s)).collect();
        translations.push(join_subwords(&toks).join(" "));
        kbest.sentences.push(entries);
    }
    Ok((translations, kbest))
}

/// K-best disk form, one entry per line:
/// `sentence_id ||| hypothesis tokens ||| nmt_score[ ||| feature]...`
pub fn kbest_to_string(list: &KBestList) -> String {
    let mut out = String::new();
    for (id, entries) in list.sentences.iter().enumerate() {
        for e in entries {
            out.push_str(&format!("{} ||| {} ||| {:.8}", id, e.tokens.join(" "), e.score));
            for f in &e.features {
                out.push_str(&format!(" ||| {:.8}", f));
            }
            out.push('\n');
        }
    }
    out
}

pub fn kbest_from_string(s: &str) -> Result<KBestList> {
    let mut list = KBestList::default();
    for (lineno, line) in s.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let err = |msg: &str| Error::Format(format!("k-best line {}: {}", lineno + 1, msg));
        let fields: Vec<&str> = line.split(" ||| ").collect();
        if fields.len() < 3 {
            return Err(err("expected `id ||| tokens ||| score`"));
        }
        let id: usize = fields[0].trim().parse().map_err(|_| err("bad sentence id"))?;
        let tokens: Vec<String> = fields[1].split_whitespace().map(str::to_string).collect();
        let score: f64 = fields[2].trim().parse().map_err(|_| err("bad score"))?;
        let features = fields[3..]
            .iter()
            .map(|f| f.trim().parse().map_err(|_| err("bad feature value")))
            .collect::<Result<Vec<f64>>>()?;
        // sentences with no surviving hypotheses leave id gaps; keep them
        // as empty entries so line alignment with the source is preserved
        while id >= list.sentences.len() {
            list.sentences.push(vec![]);
        }
        list.sentences[id].push(KBestEntry { tokens, score, features });
    }
    Ok(list)
}
