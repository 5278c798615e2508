//! The full translation network: embeddings, bidirectional encoder
//! (deep stacked or deep transition), additive attention, the
//! two-transition decoder with its deep variants, and the output softmax
//! with optional weight tying.
//!
//! Parameters live in a flat name-indexed store so that the optimizer,
//! checkpoints, and gradient checks can treat them uniformly; the forward
//! pass binds every tensor onto a tape and works with vars.

use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rnn::{self, GateParams, GruParams, LstmParams, RnnState, UnitKind};
use crate::tensor::{Gradients, Tape, Tensor, Var};

/// Reserved target-side sentence-start symbol.
pub const BOS_ID: usize = 0;
/// Reserved end-of-sentence symbol.
pub const EOS_ID: usize = 1;
/// Reserved unknown-token symbol.
pub const UNK_ID: usize = 2;
/// Number of reserved ids at the bottom of every vocabulary.
pub const RESERVED_TOKENS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    DeepStacked,
    DeepTransition,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Unit {
    Gru,
    Lstm,
}

impl Unit {
    pub fn kind(self) -> UnitKind {
        match self {
            Unit::Gru => UnitKind::Gru,
            Unit::Lstm => UnitKind::Lstm,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub src_vocab: usize,
    pub tgt_vocab: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub unit: Unit,
    pub architecture: Architecture,
    /// Encoder stack depth (deep stacked).
    pub enc_depth: usize,
    /// Decoder stack depth (deep stacked).
    pub dec_depth: usize,
    /// Encoder transitions per time step (deep transition).
    pub enc_transitions: usize,
    /// Decoder transitions per time step (deep transition); the shallow
    /// decoder already has two.
    pub dec_transitions: usize,
    /// Alignment dimension of the attention MLP; defaults to hidden_dim.
    pub align_dim: Option<usize>,
    pub layer_norm: bool,
    pub tied_embeddings: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            src_vocab: 0,
            tgt_vocab: 0,
            embed_dim: 500,
            hidden_dim: 1024,
            unit: Unit::Gru,
            architecture: Architecture::DeepStacked,
            enc_depth: 4,
            dec_depth: 4,
            enc_transitions: 4,
            dec_transitions: 8,
            align_dim: None,
            layer_norm: true,
            tied_embeddings: true,
        }
    }
}

impl ModelConfig {
    pub fn align(&self) -> usize {
        self.align_dim.unwrap_or(self.hidden_dim)
    }

    pub fn validate(&self) -> Result<()> {
        if self.src_vocab <= RESERVED_TOKENS || self.tgt_vocab <= RESERVED_TOKENS {
            return Err(Error::Config("vocab sizes must exceed the reserved symbols".into()));
        }
        if self.embed_dim == 0 || self.hidden_dim == 0 {
            return Err(Error::Config("embed/hidden dims must be positive".into()));
        }
        if self.enc_depth < 1 || self.dec_depth < 1 {
            return Err(Error::Config("stack depths must be >= 1".into()));
        }
        if self.enc_transitions < 1 {
            return Err(Error::Config("encoder transitions must be >= 1".into()));
        }
        if self.dec_transitions < 2 {
            return Err(Error::Config("decoder transitions must be >= 2".into()));
        }
        Ok(())
    }
}

/// Flat, ordered parameter store. Iteration order is the deterministic
/// creation order, which checkpoints and the optimizer rely on.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ModelParams {
    entries: IndexMap<String, Tensor>,
}

/// Named gradients aligned with [`ModelParams`] iteration order.
pub type GradMap = IndexMap<String, Tensor>;

impl ModelParams {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries.get_mut(name)
    }

    pub fn insert(&mut self, name: String, t: Tensor) {
        self.entries.insert(name, t);
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.entries.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn scalar_count(&self) -> usize {
        self.entries.values().map(|t| t.len()).sum()
    }
}

/// Gate-block layout of one recurrent unit, used when enumerating names.
fn gate_suffixes(kind: UnitKind) -> &'static [&'static str] {
    match kind {
        UnitKind::Gru => &["", "_z", "_r"],
        UnitKind::Lstm => &["_i", "_f", "_c", "_o"],
    }
}

struct ParamBuilder {
    params: ModelParams,
    rng: ChaCha8Rng,
}

impl ParamBuilder {
    fn weight(&mut self, name: String, rows: usize, cols: usize) {
        let bound = (6.0 / (rows + cols) as f64).sqrt();
        let data: Vec<f64> = (0..rows * cols).map(|_| self.rng.gen_range(-bound..bound)).collect();
        self.params.insert(name, Tensor::new(vec![rows, cols], data).unwrap());
    }

    fn zeros(&mut self, name: String, n: usize) {
        self.params.insert(name, Tensor::vector(vec![0.0; n]));
    }

    fn ones(&mut self, name: String, n: usize) {
        self.params.insert(name, Tensor::vector(vec![1.0; n]));
    }

    fn unit(&mut self, prefix: &str, kind: UnitKind, input_dim: Option<usize>, hidden: usize, layer_norm: bool) {
        for sfx in gate_suffixes(kind) {
            if let Some(d) = input_dim {
                self.weight(format!("{prefix}.w{sfx}"), hidden, d);
            }
            self.weight(format!("{prefix}.u{sfx}"), hidden, hidden);
            self.zeros(format!("{prefix}.b{sfx}"), hidden);
            if layer_norm {
                self.ones(format!("{prefix}.ln{sfx}.gain"), hidden);
                self.zeros(format!("{prefix}.ln{sfx}.bias"), hidden);
            }
        }
    }
}

/// Enumerate every unit prefix of the model with its input dimension
/// (`None` means a zero-input transition).
fn unit_layout(cfg: &ModelConfig) -> Vec<(String, Option<usize>)> {
    let mut units = Vec::new();
    let e = cfg.embed_dim;
    let h = cfg.hidden_dim;
    match cfg.architecture {
        Architecture::DeepStacked => {
            for dir in ["fwd", "bwd"] {
                for l in 0..cfg.enc_depth {
                    let input = if l == 0 { e } else { h };
                    units.push((format!("enc.{dir}.l{l}"), Some(input)));
                }
            }
            units.push(("dec.l0.u1".into(), Some(e)));
            units.push(("dec.l0.u2".into(), Some(2 * h)));
            for l in 1..cfg.dec_depth {
                units.push((format!("dec.l{l}"), Some(h)));
            }
        }
        Architecture::DeepTransition => {
            for dir in ["fwd", "bwd"] {
                for l in 0..cfg.enc_transitions {
                    let input = if l == 0 { Some(e) } else { None };
                    units.push((format!("enc.{dir}.t{l}"), input));
                }
            }
            units.push(("dec.t0".into(), Some(e)));
            units.push(("dec.t1".into(), Some(2 * h)));
            for l in 2..cfg.dec_transitions {
                units.push((format!("dec.t{l}"), None));
            }
        }
    }
    units
}

/// Deterministic Glorot-uniform initialization; biases and the attention
/// score bias start at zero, layer-norm gains at one.
pub fn init_params(cfg: &ModelConfig, seed: u64) -> Result<ModelParams> {
    cfg.validate()?;
    let mut b = ParamBuilder { params: ModelParams::default(), rng: ChaCha8Rng::seed_from_u64(seed) };
    let (e, h, a) = (cfg.embed_dim, cfg.hidden_dim, cfg.align());

    b.weight("src_emb".into(), cfg.src_vocab, e);
    b.weight("tgt_emb".into(), cfg.tgt_vocab, e);

    for (prefix, input) in unit_layout(cfg) {
        b.unit(&prefix, cfg.unit.kind(), input, h, cfg.layer_norm);
    }

    b.weight("att.w_a".into(), a, h);
    b.weight("att.u_a".into(), a, 2 * h);
    b.zeros("att.b_a".into(), a);
    b.weight("att.v_a".into(), a, 1);
    b.params.insert("att.v_a".into(), {
        // v_a is a vector; re-draw with vector shape for clarity
        let t = b.params.get("att.v_a").unwrap().clone();
        Tensor::vector(t.data().to_vec())
    });
    b.zeros("att.beta".into(), 1);

    b.weight("out.u_t".into(), e, h);
    b.weight("out.v_t".into(), e, e);
    b.weight("out.c_t".into(), e, 2 * h);
    b.zeros("out.b_t".into(), e);
    if !cfg.tied_embeddings {
        b.weight("out.w_t".into(), cfg.tgt_vocab, e);
    }
    Ok(b.params)
}

/// Attention parameters bound on a tape.
#[derive(Debug, Clone)]
pub struct AttentionParams {
    pub w_a: Var,
    pub u_a: Var,
    pub b_a: Var,
    pub v_a: Var,
    pub beta: Var,
}

/// Per-position encoder annotations: the concatenated forward/backward
/// hidden vector for every unmasked source position, plus the padded
/// length the caller supplied.
#[derive(Debug, Clone)]
pub struct Annotations {
    pub vecs: Vec<Var>,
    pub padded_len: usize,
}

/// Decoder recurrent state: one entry per stack layer for the deep
/// stacked decoder, a single final-transition state for deep transition.
#[derive(Debug, Clone)]
pub struct DecoderState {
    pub layers: Vec<RnnState>,
}

/// Output of one decoder step.
pub struct StepOutput {
    pub state: DecoderState,
    /// Unnormalized vocabulary scores; apply softmax/log-softmax as needed.
    pub logits: Var,
    /// Attention weights over the padded source length (zero on padding).
    pub weights: Vec<f64>,
}

enum BoundUnit {
    Gru(GruParams),
    Lstm(LstmParams),
}

/// Model parameters bound onto a tape for one forward/backward session.
pub struct BoundModel<'c> {
    pub cfg: &'c ModelConfig,
    vars: IndexMap<String, Var>,
}

impl<'c> BoundModel<'c> {
    /// Register every parameter tensor on the tape.
    pub fn bind(tape: &mut Tape, params: &ModelParams, cfg: &'c ModelConfig) -> Self {
        let mut vars = IndexMap::with_capacity(params.len());
        for (name, t) in params.iter() {
            vars.insert(name.clone(), tape.param(t.clone()));
        }
        BoundModel { cfg, vars }
    }

    fn var(&self, name: &str) -> Var {
        *self.vars.get(name).unwrap_or_else(|| panic!("missing parameter {name}"))
    }

    /// Collect gradients for every parameter, zeros where untouched.
    pub fn extract_grads(&self, grads: &Gradients, params: &ModelParams) -> GradMap {
        let mut out = GradMap::with_capacity(params.len());
        for (name, t) in params.iter() {
            let v = self.var(name);
            out.insert(name.clone(), grads.grad_or_zeros(v, t.shape()));
        }
        out
    }

    fn gate(&self, prefix: &str, sfx: &str, has_input: bool) -> GateParams {
        GateParams {
            w: if has_input { Some(self.var(&format!("{prefix}.w{sfx}"))) } else { None },
            u: self.var(&format!("{prefix}.u{sfx}")),
            b: self.var(&format!("{prefix}.b{sfx}")),
            ln: if self.cfg.layer_norm {
                Some((
                    self.var(&format!("{prefix}.ln{sfx}.gain")),
                    self.var(&format!("{prefix}.ln{sfx}.bias")),
                ))
            } else {
                None
            },
        }
    }

    fn unit(&self, prefix: &str, has_input: bool) -> BoundUnit {
        match self.cfg.unit.kind() {
            UnitKind::Gru => BoundUnit::Gru(GruParams {
                cand: self.gate(prefix, "", has_input),
                update: self.gate(prefix, "_z", has_input),
                reset: self.gate(prefix, "_r", has_input),
            }),
            UnitKind::Lstm => BoundUnit::Lstm(LstmParams {
                input: self.gate(prefix, "_i", has_input),
                forget: self.gate(prefix, "_f", has_input),
                cand: self.gate(prefix, "_c", has_input),
                output: self.gate(prefix, "_o", has_input),
            }),
        }
    }

    fn unit_step(&self, tape: &mut Tape, unit: &BoundUnit, input: Option<Var>, st: &RnnState) -> Result<RnnState> {
        match unit {
            BoundUnit::Gru(p) => rnn::gru_step(tape, p, input, st),
            BoundUnit::Lstm(p) => rnn::lstm_step(tape, p, input, st),
        }
    }

    fn zero_state(&self, tape: &mut Tape) -> RnnState {
        rnn::unit_state_init(tape, self.cfg.unit.kind(), self.cfg.hidden_dim)
    }

    pub fn attention_params(&self) -> AttentionParams {
        AttentionParams {
            w_a: self.var("att.w_a"),
            u_a: self.var("att.u_a"),
            b_a: self.var("att.b_a"),
            v_a: self.var("att.v_a"),
            beta: self.var("att.beta"),
        }
    }

    fn embed(&self, tape: &mut Tape, table: &str, id: usize, vocab: usize) -> Result<Var> {
        if id >= vocab {
            return Err(Error::Vocab(format!("token id {id} out of range ({vocab})")));
        }
        tape.row(self.var(table), id)
    }

    /// Run one encoder direction, returning the per-position hidden vectors.
    ///
    /// Deep stacked: layer 1 runs in the direction's base order and each
    /// higher layer reverses, with residual sums above layer 1. Deep
    /// transition: the state of the last transition feeds the next step's
    /// first transition; higher transitions receive no input.
    fn encode_direction(&self, tape: &mut Tape, ids: &[usize], backward: bool) -> Result<Vec<Var>> {
        let dir = if backward { "bwd" } else { "fwd" };
        let m = ids.len();
        let mut embs = Vec::with_capacity(m);
        for &id in ids {
            embs.push(self.embed(tape, "src_emb", id, self.cfg.src_vocab)?);
        }
        match self.cfg.architecture {
            Architecture::DeepStacked => {
                // outputs[j] holds w_j^l after processing layer l
                let mut outputs: Vec<Var> = Vec::new();
                for l in 0..self.cfg.enc_depth {
                    let unit = self.unit(&format!("enc.{dir}.l{l}"), true);
                    // base direction for layer 0; alternate above
                    let reversed = backward ^ (l % 2 == 1);
                    let mut st = self.zero_state(tape);
                    let mut layer_h: Vec<Option<Var>> = vec![None; m];
                    let order: Vec<usize> = if reversed { (0..m).rev().collect() } else { (0..m).collect() };
                    for j in order {
                        let input = if l == 0 { embs[j] } else { outputs[j] };
                        st = self.unit_step(tape, &unit, Some(input), &st)?;
                        layer_h[j] = Some(st.hidden);
                    }
                    let layer_h: Vec<Var> = layer_h.into_iter().map(|v| v.unwrap()).collect();
                    outputs = if l == 0 {
                        layer_h
                    } else {
                        let mut next = Vec::with_capacity(m);
                        for j in 0..m {
                            next.push(tape.add(layer_h[j], outputs[j])?);
                        }
                        next
                    };
                }
                Ok(outputs)
            }
            Architecture::DeepTransition => {
                let units: Vec<BoundUnit> = (0..self.cfg.enc_transitions)
                    .map(|l| self.unit(&format!("enc.{dir}.t{l}"), l == 0))
                    .collect();
                let mut carry = self.zero_state(tape);
                let mut hidden: Vec<Option<Var>> = vec![None; m];
                let order: Vec<usize> = if backward { (0..m).rev().collect() } else { (0..m).collect() };
                for j in order {
                    let mut st = self.unit_step(tape, &units[0], Some(embs[j]), &carry)?;
                    for unit in &units[1..] {
                        st = self.unit_step(tape, unit, None, &st)?;
                    }
                    hidden[j] = Some(st.hidden);
                    carry = st;
                }
                Ok(hidden.into_iter().map(|v| v.unwrap()).collect())
            }
        }
    }

    /// Bidirectional encoding of one source sentence. `mask` marks real
    /// positions; padding must be a suffix and is excluded entirely.
    pub fn encode(&self, tape: &mut Tape, source_ids: &[usize], mask: Option<&[bool]>) -> Result<Annotations> {
        let padded_len = source_ids.len();
        let real_len = match mask {
            None => padded_len,
            Some(m) => {
                if m.len() != padded_len {
                    return Err(Error::Dim("mask length differs from source length".into()));
                }
                let real = m.iter().take_while(|&&b| b).count();
                if m[real..].iter().any(|&b| b) {
                    return Err(Error::Arg("padding mask must be a suffix".into()));
                }
                real
            }
        };
        if real_len == 0 {
            return Err(Error::Arg("empty source sentence".into()));
        }
        let ids = &source_ids[..real_len];
        let fwd = self.encode_direction(tape, ids, false)?;
        let bwd = self.encode_direction(tape, ids, true)?;
        let mut vecs = Vec::with_capacity(real_len);
        for (f, b) in fwd.into_iter().zip(bwd) {
            vecs.push(tape.concat(f, b)?);
        }
        Ok(Annotations { vecs, padded_len })
    }

    pub fn init_decoder_state(&self, tape: &mut Tape) -> DecoderState {
        let n = match self.cfg.architecture {
            Architecture::DeepStacked => self.cfg.dec_depth,
            Architecture::DeepTransition => 1,
        };
        DecoderState { layers: (0..n).map(|_| self.zero_state(tape)).collect() }
    }

    /// One decoder step: previous token in, new state, vocabulary logits,
    /// and attention weights out.
    pub fn decoder_step(
        &self,
        tape: &mut Tape,
        y_prev: usize,
        st: &DecoderState,
        ann: &Annotations,
    ) -> Result<StepOutput> {
        let emb = self.embed(tape, "tgt_emb", y_prev, self.cfg.tgt_vocab)?;
        let ap = self.attention_params();
        let (new_state, final_hidden, context, weights) = match self.cfg.architecture {
            Architecture::DeepStacked => {
                let u1 = self.unit("dec.l0.u1", true);
                let u2 = self.unit("dec.l0.u2", true);
                let s_prime = self.unit_step(tape, &u1, Some(emb), &st.layers[0])?;
                let (context, weights) = attention(tape, &ap, s_prime.hidden, ann)?;
                let s1 = self.unit_step(tape, &u2, Some(context), &s_prime)?;
                let mut layers = Vec::with_capacity(self.cfg.dec_depth);
                layers.push(s1.clone());
                let mut w = s1.hidden;
                for l in 1..self.cfg.dec_depth {
                    let unit = self.unit(&format!("dec.l{l}"), true);
                    let sl = self.unit_step(tape, &unit, Some(w), &st.layers[l])?;
                    w = tape.add(sl.hidden, w)?;
                    layers.push(sl);
                }
                (DecoderState { layers }, w, context, weights)
            }
            Architecture::DeepTransition => {
                let u1 = self.unit("dec.t0", true);
                let u2 = self.unit("dec.t1", true);
                let s_prime = self.unit_step(tape, &u1, Some(emb), &st.layers[0])?;
                let (context, weights) = attention(tape, &ap, s_prime.hidden, ann)?;
                let mut s = self.unit_step(tape, &u2, Some(context), &s_prime)?;
                for l in 2..self.cfg.dec_transitions {
                    let unit = self.unit(&format!("dec.t{l}"), false);
                    s = self.unit_step(tape, &unit, None, &s)?;
                }
                let hidden = s.hidden;
                (DecoderState { layers: vec![s] }, hidden, context, weights)
            }
        };

        // t_i = softmax(W_t tanh(U_t s + V_t E[y_{i-1}] + C_t c + b_t))
        let us = tape.matmul(self.var("out.u_t"), final_hidden)?;
        let ve = tape.matmul(self.var("out.v_t"), emb)?;
        let cc = tape.matmul(self.var("out.c_t"), context)?;
        let mut inter = tape.add(us, ve)?;
        inter = tape.add(inter, cc)?;
        inter = tape.add(inter, self.var("out.b_t"))?;
        let inter = tape.tanh(inter);
        let w_t = if self.cfg.tied_embeddings { self.var("tgt_emb") } else { self.var("out.w_t") };
        let logits = tape.matmul(w_t, inter)?;
        Ok(StepOutput { state: new_state, logits, weights })
    }

    /// Sum of per-step log-probabilities of `y` given `x`, as a tape var.
    /// `y` must end with the end-of-sentence symbol.
    pub fn sentence_logprob_var(&self, tape: &mut Tape, x: &[usize], y: &[usize]) -> Result<Var> {
        if y.is_empty() || x.is_empty() {
            return Err(Error::Arg("empty sentence".into()));
        }
        if *y.last().unwrap() != EOS_ID {
            return Err(Error::Arg("target must end with the end-of-sentence symbol".into()));
        }
        let ann = self.encode(tape, x, None)?;
        let mut st = self.init_decoder_state(tape);
        let mut prev = BOS_ID;
        let mut terms = Vec::with_capacity(y.len());
        for &tok in y {
            let step = self.decoder_step(tape, prev, &st, &ann)?;
            if tok >= self.cfg.tgt_vocab {
                return Err(Error::Vocab(format!("target id {tok} out of range")));
            }
            let lp = tape.log_softmax(step.logits)?;
            terms.push(tape.get(lp, tok)?);
            st = step.state;
            prev = tok;
        }
        let mut total = terms[0];
        for t in &terms[1..] {
            total = tape.add(total, *t)?;
        }
        Ok(total)
    }
}

/// log p(y | x) under one model.
pub fn sentence_logprob(params: &ModelParams, cfg: &ModelConfig, x: &[usize], y: &[usize]) -> Result<f64> {
    let mut tape = Tape::new();
    let bound = BoundModel::bind(&mut tape, params, cfg);
    let lp = bound.sentence_logprob_var(&mut tape, x, y)?;
    tape.value(lp).item()
}

/// Additive attention (soft alignment): scores
/// `e_j = v_a . tanh(W_a s' + U_a h_j + b_a) + beta`, masked softmax, and
/// the weighted annotation sum as context. Returned weights cover the
/// padded source length with exact zeros on padding.
pub fn attention(tape: &mut Tape, ap: &AttentionParams, s_prime: Var, ann: &Annotations) -> Result<(Var, Vec<f64>)> {
    if ann.vecs.is_empty() {
        return Err(Error::Arg("attention over fully masked source".into()));
    }
    let ws = tape.matmul(ap.w_a, s_prime)?;
    let query = tape.add(ws, ap.b_a)?;
    let mut scores = Vec::with_capacity(ann.vecs.len());
    for &h in &ann.vecs {
        let uh = tape.matmul(ap.u_a, h)?;
        let pre = tape.add(query, uh)?;
        let act = tape.tanh(pre);
        let e = tape.dot(ap.v_a, act)?;
        let e = tape.add(e, ap.beta)?;
        scores.push(e);
    }
    let evec = tape.stack(&scores)?;
    let alpha = tape.softmax(evec)?;
    let mut context: Option<Var> = None;
    for (j, &h) in ann.vecs.iter().enumerate() {
        let aj = tape.get(alpha, j)?;
        let term = tape.mul_scalar(h, aj)?;
        context = Some(match context {
            None => term,
            Some(c) => tape.add(c, term)?,
        });
    }
    let mut weights = tape.value(alpha).data().to_vec();
    weights.resize(ann.padded_len, 0.0);
    Ok((context.unwrap(), weights))
}
