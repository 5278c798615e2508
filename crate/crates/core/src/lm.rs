//! N-gram language modeling: interpolated Kneser-Ney smoothing with the
//! modified (three-discount) scheme where the corpus supports it,
//! perplexity, EM-tuned mixture interpolation, and the standard textual
//! backoff (ARPA-style) format.
//!
//! Tokens are lowercased. The vocabulary is the training vocabulary plus
//! `</s>` and `<unk>`; `<s>` only ever appears as context. Probabilities
//! are stored in log10 to match the disk format.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use crate::error::{Error, Result};

pub const SENT_START: &str = "<s>";
pub const SENT_END: &str = "</s>";
pub const UNKNOWN: &str = "<unk>";

/// Stand-in log10 probability for context-only entries, as in standard
/// LM tooling.
const LOG10_NEVER: f64 = -99.0;

/// Backoff-format n-gram model: log10 conditional probability per seen
/// n-gram, log10 backoff weight per seen context.
#[derive(Debug, Clone, PartialEq)]
pub struct NGramLM {
    pub order: usize,
    probs: BTreeMap<Vec<String>, f64>,
    backoffs: BTreeMap<Vec<String>, f64>,
    vocab: BTreeSet<String>,
}

fn sentence_tokens(line: &str) -> Vec<String> {
    line.split_whitespace().map(|t| t.to_lowercase()).collect()
}

/// Per-order discounts. `Modified` keeps one discount per count class
/// (1, 2, 3+); tiny corpora whose count-of-counts cannot support the
/// modified estimates fall back to a single absolute discount.
#[derive(Debug, Clone, Copy)]
enum Discount {
    Modified { d1: f64, d2: f64, d3: f64 },
    Absolute(f64),
}

impl Discount {
    fn for_count(&self, c: u64) -> f64 {
        match *self {
            Discount::Modified { d1, d2, d3 } => match c {
                0 => 0.0,
                1 => d1,
                2 => d2,
                _ => d3,
            },
            Discount::Absolute(d) => {
                if c == 0 {
                    0.0
                } else {
                    d
                }
            }
        }
    }

    fn estimate(counts: impl Iterator<Item = u64>) -> Discount {
        let mut n = [0u64; 4];
        for c in counts {
            if (1..=4).contains(&c) {
                n[(c - 1) as usize] += 1;
            }
        }
        let (n1, n2, n3, n4) = (n[0] as f64, n[1] as f64, n[2] as f64, n[3] as f64);
        if n[0] > 0 && n[1] > 0 && n[2] > 0 && n[3] > 0 {
            let y = n1 / (n1 + 2.0 * n2);
            let d1 = 1.0 - 2.0 * y * n2 / n1;
            let d2 = 2.0 - 3.0 * y * n3 / n2;
            let d3 = 3.0 - 4.0 * y * n4 / n3;
            if d1 >= 0.0 && d2 >= 0.0 && d3 >= 0.0 {
                return Discount::Modified { d1, d2, d3 };
            }
        }
        if n[0] > 0 {
            Discount::Absolute(n1 / (n1 + 2.0 * n2))
        } else {
            Discount::Absolute(0.5)
        }
    }
}

/// Train an interpolated Kneser-Ney model of the given order on
/// whitespace-tokenized lines (lowercased; empty lines skipped).
pub fn train_lm(lines: &[String], order: usize) -> Result<NGramLM> {
    if order < 1 {
        return Err(Error::Arg("LM order must be at least 1".into()));
    }
    let sentences: Vec<Vec<String>> = lines
        .iter()
        .map(|l| sentence_tokens(l))
        .filter(|t| !t.is_empty())
        .collect();
    if sentences.is_empty() {
        return Err(Error::Arg("empty LM training corpus".into()));
    }

    let mut vocab: BTreeSet<String> = sentences.iter().flatten().cloned().collect();
    vocab.insert(SENT_END.to_string());
    vocab.insert(UNKNOWN.to_string());
    vocab.remove(SENT_START);

    // raw counts per order over sentences padded with order-1 start
    // symbols and one end symbol
    let mut raw: Vec<HashMap<Vec<String>, u64>> = vec![HashMap::new(); order + 1];
    for s in &sentences {
        let mut padded: Vec<String> = vec![SENT_START.to_string(); order.saturating_sub(1)];
        padded.extend(s.iter().cloned());
        padded.push(SENT_END.to_string());
        for n in 1..=order {
            for w in padded.windows(n) {
                *raw[n].entry(w.to_vec()).or_insert(0) += 1;
            }
        }
    }

    // adjusted counts: raw at the highest order; continuation counts
    // (distinct left extensions) below, except for start-initial grams,
    // which keep raw counts because nothing can precede them
    let mut adjusted: Vec<HashMap<Vec<String>, u64>> = vec![HashMap::new(); order + 1];
    adjusted[order] = raw[order].clone();
    for n in (1..order).rev() {
        let mut cont: HashMap<Vec<String>, u64> = HashMap::new();
        for gram in raw[n + 1].keys() {
            *cont.entry(gram[1..].to_vec()).or_insert(0) += 1;
        }
        let mut adj = HashMap::new();
        for (gram, c) in &raw[n] {
            let count = if gram[0] == SENT_START { *c } else { cont.get(gram).copied().unwrap_or(0) };
            if count > 0 {
                adj.insert(gram.clone(), count);
            }
        }
        adjusted[n] = adj;
    }

    let mut probs: BTreeMap<Vec<String>, f64> = BTreeMap::new();
    let mut backoffs: BTreeMap<Vec<String>, f64> = BTreeMap::new();
    // linear interpolated prob per gram at the previous (lower) order
    let mut lower: HashMap<Vec<String>, f64> = HashMap::new();

    for n in 1..=order {
        // grams predicting a token: exclude anything ending in <s>
        let grams: Vec<(&Vec<String>, u64)> = adjusted[n]
            .iter()
            .filter(|(g, _)| g[n - 1] != SENT_START)
            .map(|(g, &c)| (g, c))
            .collect();
        let discount = Discount::estimate(grams.iter().map(|(_, c)| *c));

        // per-context totals and discount mass
        let mut totals: HashMap<Vec<String>, (u64, f64)> = HashMap::new();
        for (gram, c) in &grams {
            let e = totals.entry(gram[..n - 1].to_vec()).or_insert((0, 0.0));
            e.0 += c;
            e.1 += discount.for_count(*c);
        }

        let mut current: HashMap<Vec<String>, f64> = HashMap::new();
        if n == 1 {
            let (total, dmass) = totals.get(&vec![]).copied().unwrap_or((0, 0.0));
            let total = total as f64;
            let gamma = dmass / total;
            let uniform = 1.0 / vocab.len() as f64;
            for w in &vocab {
                let c = adjusted[1].get(&vec![w.clone()]).copied().unwrap_or(0);
                let p = (c as f64 - discount.for_count(c)).max(0.0) / total + gamma * uniform;
                current.insert(vec![w.clone()], p);
                probs.insert(vec![w.clone()], p.log10());
            }
        } else {
            for (gram, c) in &grams {
                let ctx = &gram[..n - 1];
                let (total, dmass) = totals[ctx];
                let gamma = dmass / total as f64;
                let backed = lower
                    .get(&gram[1..].to_vec())
                    .copied()
                    .unwrap_or_else(|| lower_prob(&lower, &gram[1..]));
                let p = (*c as f64 - discount.for_count(*c)).max(0.0) / total as f64 + gamma * backed;
                current.insert((*gram).clone(), p);
                probs.insert((*gram).clone(), p.log10());
            }
            for (ctx, (total, dmass)) in &totals {
                backoffs.insert(ctx.clone(), (dmass / *total as f64).log10());
            }
        }
        lower = current;
    }

    Ok(NGramLM { order, probs, backoffs, vocab })
}

/// Linear probability of the last token of `gram` under the already-built
/// lower-order table, backing off through suffixes (needed when a
/// higher-order gram's suffix ends in a token unseen at the lower order,
/// which can only involve start-padded contexts).
fn lower_prob(lower: &HashMap<Vec<String>, f64>, gram: &[String]) -> f64 {
    for start in 0..gram.len() {
        if let Some(&p) = lower.get(&gram[start..].to_vec()) {
            return p;
        }
    }
    // the unigram table is total, so this is unreachable for valid input
    0.0
}

impl NGramLM {
    pub fn vocab(&self) -> &BTreeSet<String> {
        &self.vocab
    }

    fn map_token<'a>(&self, w: &'a str) -> &'a str {
        if self.vocab.contains(w) || w == SENT_START {
            w
        } else {
            UNKNOWN
        }
    }

    /// Linear conditional probability p(w | ctx) with standard backoff.
    pub fn prob(&self, ctx: &[String], w: &str) -> f64 {
        let w = self.map_token(&w.to_lowercase()).to_string();
        let start = ctx.len().saturating_sub(self.order - 1);
        let ctx: Vec<String> = ctx[start..]
            .iter()
            .map(|t| self.map_token(&t.to_lowercase()).to_string())
            .collect();
        self.prob_mapped(&ctx, &w)
    }

    fn prob_mapped(&self, ctx: &[String], w: &str) -> f64 {
        let mut gram: Vec<String> = ctx.to_vec();
        gram.push(w.to_string());
        if let Some(&lp) = self.probs.get(&gram) {
            if lp > LOG10_NEVER {
                return 10f64.powf(lp);
            }
        }
        if ctx.is_empty() {
            // every vocabulary word has a unigram entry; only <s> lands here
            return 0.0;
        }
        let bow = self
            .backoffs
            .get(&ctx.to_vec())
            .map(|&b| 10f64.powf(b))
            .unwrap_or(1.0);
        bow * self.prob_mapped(&ctx[1..], w)
    }

    /// Per-token linear probabilities of a tokenized sentence, including
    /// the end-of-sentence event.
    pub fn word_probs(&self, words: &[String]) -> Vec<f64> {
        let mut ctx: Vec<String> = vec![SENT_START.to_string(); self.order.saturating_sub(1)];
        let mut out = Vec::with_capacity(words.len() + 1);
        let score_one = |ctx: &mut Vec<String>, w: &str| {
            let mapped = self.map_token(&w.to_lowercase()).to_string();
            let start = ctx.len().saturating_sub(self.order - 1);
            let p = self.prob_mapped(&ctx[start..], &mapped);
            ctx.push(mapped);
            p
        };
        for w in words {
            out.push(score_one(&mut ctx, w));
        }
        out.push(score_one(&mut ctx, SENT_END));
        out
    }

    /// Natural-log probability of one tokenized sentence.
    pub fn sentence_logprob(&self, words: &[String]) -> f64 {
        self.word_probs(words).iter().map(|p| p.ln()).sum()
    }

    /// Standard textual backoff format: `\data\` header with per-order
    /// entry counts, then per-order blocks of
    /// `log10_prob<TAB>ngram<TAB>log10_backoff`.
    pub fn to_text(&self) -> String {
        let mut by_order: BTreeMap<usize, BTreeMap<Vec<String>, (f64, Option<f64>)>> = BTreeMap::new();
        for (gram, &lp) in &self.probs {
            by_order.entry(gram.len()).or_default().insert(gram.clone(), (lp, None));
        }
        // context-only entries (e.g. <s>) carry a placeholder probability
        for (ctx, &bow) in &self.backoffs {
            let e = by_order
                .entry(ctx.len())
                .or_default()
                .entry(ctx.clone())
                .or_insert((LOG10_NEVER, None));
            e.1 = Some(bow);
        }
        // <s> needs a unigram line to carry its backoff weight
        let mut out = String::from("\\data\\\n");
        for n in 1..=self.order {
            let count = by_order.get(&n).map_or(0, |m| m.len());
            out.push_str(&format!("ngram {}={}\n", n, count));
        }
        for (n, grams) in &by_order {
            out.push_str(&format!("\n\\{}-grams:\n", n));
            for (gram, (lp, bow)) in grams {
                match bow {
                    Some(b) => out.push_str(&format!("{:.7}\t{}\t{:.7}\n", lp, gram.join(" "), b)),
                    None => out.push_str(&format!("{:.7}\t{}\n", lp, gram.join(" "))),
                }
            }
        }
        out.push_str("\n\\end\\\n");
        out
    }

    pub fn from_text(s: &str) -> Result<NGramLM> {
        let mut probs = BTreeMap::new();
        let mut backoffs = BTreeMap::new();
        let mut order = 0usize;
        let mut in_grams = false;
        for (lineno, line) in s.lines().enumerate() {
            let err = |msg: &str| Error::Format(format!("LM file line {}: {}", lineno + 1, msg));
            let line = line.trim_end();
            if line.is_empty() || line == "\\data\\" || line == "\\end\\" {
                in_grams = false;
                continue;
            }
            if let Some(rest) = line.strip_prefix("ngram ") {
                let n: usize = rest
                    .split('=')
                    .next()
                    .and_then(|x| x.trim().parse().ok())
                    .ok_or_else(|| err("bad ngram count header"))?;
                order = order.max(n);
                continue;
            }
            if line.starts_with('\\') && line.ends_with("-grams:") {
                in_grams = true;
                continue;
            }
            if !in_grams {
                return Err(err("unexpected content outside a grams block"));
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() < 2 || fields.len() > 3 {
                return Err(err("expected `prob<TAB>ngram[<TAB>backoff]`"));
            }
            let lp: f64 = fields[0].parse().map_err(|_| err("bad probability"))?;
            let gram: Vec<String> = fields[1].split_whitespace().map(str::to_string).collect();
            if gram.is_empty() {
                return Err(err("empty ngram"));
            }
            if lp > LOG10_NEVER {
                probs.insert(gram.clone(), lp);
            }
            if fields.len() == 3 {
                let bow: f64 = fields[2].parse().map_err(|_| err("bad backoff weight"))?;
                backoffs.insert(gram, bow);
            }
        }
        if order == 0 || probs.is_empty() {
            return Err(Error::Format("LM file has no ngram entries".into()));
        }
        let vocab: BTreeSet<String> = probs
            .keys()
            .filter(|g| g.len() == 1 && g[0] != SENT_START)
            .map(|g| g[0].clone())
            .collect();
        Ok(NGramLM { order, probs, backoffs, vocab })
    }
}

/// exp of the mean negative log-probability over all scored tokens
/// (sentence-end events included; empty lines skipped).
pub fn perplexity(lm: &NGramLM, lines: &[String]) -> Result<f64> {
    perplexity_of(lines, |words| lm.word_probs(words))
}

fn perplexity_of(lines: &[String], probs: impl Fn(&[String]) -> Vec<f64>) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for line in lines {
        let words = sentence_tokens(line);
        if words.is_empty() {
            continue;
        }
        for p in probs(&words) {
            if p <= 0.0 {
                return Err(Error::Arg("zero-probability event while scoring".into()));
            }
            total += p.ln();
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::Arg("empty evaluation corpus".into()));
    }
    Ok((-total / count as f64).exp())
}

/// Fixed mixture of component models with one global weight each.
#[derive(Debug, Clone)]
pub struct InterpolatedLM {
    pub components: Vec<NGramLM>,
    pub weights: Vec<f64>,
}

impl InterpolatedLM {
    pub fn word_probs(&self, words: &[String]) -> Vec<f64> {
        let mut mixed = vec![0.0; words.len() + 1];
        for (lm, &w) in self.components.iter().zip(&self.weights) {
            for (m, p) in mixed.iter_mut().zip(lm.word_probs(words)) {
                *m += w * p;
            }
        }
        mixed
    }

    pub fn sentence_logprob(&self, words: &[String]) -> f64 {
        self.word_probs(words).iter().map(|p| p.ln()).sum()
    }

    pub fn perplexity(&self, lines: &[String]) -> Result<f64> {
        perplexity_of(lines, |words| self.word_probs(words))
    }
}

/// EM over the mixture weights, maximizing development-set likelihood.
/// The mixture log-likelihood is concave in the weights, so EM converges
/// to the optimum; in particular the result is never worse than the best
/// single component.
pub fn tune_interpolation(components: Vec<NGramLM>, dev: &[String]) -> Result<InterpolatedLM> {
    let k = components.len();
    if k == 0 {
        return Err(Error::Arg("no component models".into()));
    }
    // per-token component probabilities, computed once
    let mut table: Vec<Vec<f64>> = Vec::new();
    for line in dev {
        let words = sentence_tokens(line);
        if words.is_empty() {
            continue;
        }
        let per_comp: Vec<Vec<f64>> = components.iter().map(|lm| lm.word_probs(&words)).collect();
        for t in 0..per_comp[0].len() {
            table.push(per_comp.iter().map(|c| c[t]).collect());
        }
    }
    if table.is_empty() {
        return Err(Error::Arg("empty development corpus".into()));
    }

    let loglik = |w: &[f64]| -> f64 {
        table
            .iter()
            .map(|row| row.iter().zip(w).map(|(p, wi)| p * wi).sum::<f64>().ln())
            .sum()
    };

    let mut weights = vec![1.0 / k as f64; k];
    let mut prev_ll = loglik(&weights);
    for _ in 0..200 {
        let mut resp = vec![0.0; k];
        for row in &table {
            let mix: f64 = row.iter().zip(&weights).map(|(p, w)| p * w).sum();
            for i in 0..k {
                resp[i] += weights[i] * row[i] / mix;
            }
        }
        let mut delta: f64 = 0.0;
        for i in 0..k {
            let next = resp[i] / table.len() as f64;
            delta = delta.max((next - weights[i]).abs());
            weights[i] = next;
        }
        let ll = loglik(&weights);
        debug_assert!(ll >= prev_ll - 1e-9, "EM decreased the likelihood");
        prev_ll = ll;
        if delta < 1e-6 {
            break;
        }
    }
    // when the optimum sits at a simplex corner, EM only approaches it
    // asymptotically; never return anything worse than the best corner
    for i in 0..k {
        let mut corner = vec![0.0; k];
        corner[i] = 1.0;
        if loglik(&corner) > prev_ll {
            prev_ll = loglik(&corner);
            weights = corner;
        }
    }
    Ok(InterpolatedLM { components, weights })
}
