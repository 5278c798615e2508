//! Shared helpers for the integration and acceptance suites: an
//! independent plain-`f64` re-implementation of the shallow
//! encoder-decoder forward pass (the oracle for depth-reduction checks),
//! a finite-difference gradient checker, and copy-task utilities.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use nmt_core::decoding::{beam_search, EnsembleSpec};
use nmt_core::model::{
    Architecture, ModelConfig, ModelParams, Unit, BOS_ID, EOS_ID, RESERVED_TOKENS,
};
use nmt_core::training::{nll_loss, Batch, Pair};
use nmt_core::Tensor;

pub fn toy_config(arch: Architecture, unit: Unit) -> ModelConfig {
    ModelConfig {
        src_vocab: 6,
        tgt_vocab: 6,
        embed_dim: 3,
        hidden_dim: 4,
        unit,
        architecture: arch,
        enc_depth: 2,
        dec_depth: 2,
        enc_transitions: 2,
        dec_transitions: 3,
        align_dim: Some(3),
        layer_norm: true,
        tied_embeddings: true,
    }
}

pub fn shallow_config(arch: Architecture, unit: Unit) -> ModelConfig {
    ModelConfig {
        enc_depth: 1,
        dec_depth: 1,
        enc_transitions: 1,
        dec_transitions: 2,
        layer_norm: false,
        tied_embeddings: false,
        ..toy_config(arch, unit)
    }
}

// ---------------------------------------------------------------------
// plain-f64 shallow forward oracle
// ---------------------------------------------------------------------

fn matvec(m: &Tensor, v: &[f64]) -> Vec<f64> {
    let (r, c) = (m.rows(), m.cols());
    assert_eq!(c, v.len());
    let d = m.data();
    (0..r).map(|i| (0..c).map(|j| d[i * c + j] * v[j]).sum()).collect()
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn log_softmax(x: &[f64]) -> Vec<f64> {
    let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + x.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    x.iter().map(|v| v - lse).collect()
}

struct RawGate<'a> {
    w: Option<&'a Tensor>,
    u: &'a Tensor,
    b: &'a Tensor,
}

impl<'a> RawGate<'a> {
    fn get(p: &'a ModelParams, prefix: &str, sfx: &str) -> RawGate<'a> {
        RawGate {
            w: p.get(&format!("{prefix}.w{sfx}")),
            u: p.get(&format!("{prefix}.u{sfx}")).unwrap(),
            b: p.get(&format!("{prefix}.b{sfx}")).unwrap(),
        }
    }

    fn pre(&self, x: Option<&[f64]>, h: &[f64]) -> Vec<f64> {
        let mut s = matvec(self.u, h);
        if let (Some(w), Some(x)) = (self.w, x) {
            for (si, wi) in s.iter_mut().zip(matvec(w, x)) {
                *si += wi;
            }
        }
        for (si, bi) in s.iter_mut().zip(self.b.data()) {
            *si += bi;
        }
        s
    }
}

#[derive(Clone)]
struct RawState {
    h: Vec<f64>,
    c: Vec<f64>,
}

fn raw_step(p: &ModelParams, unit: Unit, prefix: &str, x: Option<&[f64]>, st: &RawState) -> RawState {
    match unit {
        Unit::Gru => {
            let z: Vec<f64> = RawGate::get(p, prefix, "_z").pre(x, &st.h).iter().map(|&v| sigmoid(v)).collect();
            let r: Vec<f64> = RawGate::get(p, prefix, "_r").pre(x, &st.h).iter().map(|&v| sigmoid(v)).collect();
            let rh: Vec<f64> = r.iter().zip(&st.h).map(|(a, b)| a * b).collect();
            let hbar: Vec<f64> = RawGate::get(p, prefix, "").pre(x, &rh).iter().map(|&v| v.tanh()).collect();
            let h = st
                .h
                .iter()
                .zip(z.iter().zip(&hbar))
                .map(|(&h, (&z, &hb))| h + z * (hb - h))
                .collect();
            RawState { h, c: vec![] }
        }
        Unit::Lstm => {
            let gate = |sfx: &str| -> Vec<f64> {
                RawGate::get(p, prefix, sfx).pre(x, &st.h).iter().map(|&v| sigmoid(v)).collect()
            };
            let i = gate("_i");
            let f = gate("_f");
            let o = gate("_o");
            let cand: Vec<f64> = RawGate::get(p, prefix, "_c").pre(x, &st.h).iter().map(|&v| v.tanh()).collect();
            let c: Vec<f64> = (0..st.c.len()).map(|k| f[k] * st.c[k] + i[k] * cand[k]).collect();
            let h = o.iter().zip(&c).map(|(&o, &c)| o * c.tanh()).collect();
            RawState { h, c }
        }
    }
}

fn raw_zero(unit: Unit, dim: usize) -> RawState {
    RawState {
        h: vec![0.0; dim],
        c: if unit == Unit::Lstm { vec![0.0; dim] } else { vec![] },
    }
}

fn emb_row(p: &ModelParams, table: &str, id: usize) -> Vec<f64> {
    let t = p.get(table).unwrap();
    let c = t.cols();
    t.data()[id * c..(id + 1) * c].to_vec()
}

/// Independent shallow forward pass: single-layer bidirectional encoder,
/// two-unit attention decoder, untied output layer, no layer norm.
/// Works for shallow parameterizations of either architecture.
pub fn oracle_sentence_logprob(p: &ModelParams, cfg: &ModelConfig, x: &[usize], y: &[usize]) -> f64 {
    assert!(!cfg.layer_norm && !cfg.tied_embeddings);
    let unit = cfg.unit;
    let (enc_f, enc_b, dec1, dec2) = match cfg.architecture {
        Architecture::DeepStacked => ("enc.fwd.l0", "enc.bwd.l0", "dec.l0.u1", "dec.l0.u2"),
        Architecture::DeepTransition => ("enc.fwd.t0", "enc.bwd.t0", "dec.t0", "dec.t1"),
    };

    // bidirectional annotations
    let mut ann: Vec<Vec<f64>> = vec![vec![]; x.len()];
    let mut st = raw_zero(unit, cfg.hidden_dim);
    for (j, &id) in x.iter().enumerate() {
        st = raw_step(p, unit, enc_f, Some(&emb_row(p, "src_emb", id)), &st);
        ann[j] = st.h.clone();
    }
    st = raw_zero(unit, cfg.hidden_dim);
    for (j, &id) in x.iter().enumerate().rev() {
        st = raw_step(p, unit, enc_b, Some(&emb_row(p, "src_emb", id)), &st);
        ann[j].extend(st.h.iter());
    }

    let w_a = p.get("att.w_a").unwrap();
    let u_a = p.get("att.u_a").unwrap();
    let b_a = p.get("att.b_a").unwrap();
    let v_a = p.get("att.v_a").unwrap();
    let beta = p.get("att.beta").unwrap().data()[0];

    let mut state = raw_zero(unit, cfg.hidden_dim);
    let mut prev = BOS_ID;
    let mut total = 0.0;
    for &tok in y {
        let emb = emb_row(p, "tgt_emb", prev);
        let s_prime = raw_step(p, unit, dec1, Some(&emb), &state);

        // additive attention over the annotations
        let query: Vec<f64> = matvec(w_a, &s_prime.h)
            .iter()
            .zip(b_a.data())
            .map(|(a, b)| a + b)
            .collect();
        let scores: Vec<f64> = ann
            .iter()
            .map(|h| {
                let act: Vec<f64> = matvec(u_a, h)
                    .iter()
                    .zip(&query)
                    .map(|(a, b)| (a + b).tanh())
                    .collect();
                v_a.data().iter().zip(&act).map(|(a, b)| a * b).sum::<f64>() + beta
            })
            .collect();
        let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = scores.iter().map(|&e| (e - m).exp()).collect();
        let z: f64 = exps.iter().sum();
        let mut context = vec![0.0; 2 * cfg.hidden_dim];
        for (h, &e) in ann.iter().zip(&exps) {
            for (ci, &hi) in context.iter_mut().zip(h) {
                *ci += (e / z) * hi;
            }
        }

        state = raw_step(p, unit, dec2, Some(&context), &s_prime);

        let mut inter = matvec(p.get("out.u_t").unwrap(), &state.h);
        for (ii, v) in inter.iter_mut().zip(matvec(p.get("out.v_t").unwrap(), &emb)) {
            *ii += v;
        }
        for (ii, v) in inter.iter_mut().zip(matvec(p.get("out.c_t").unwrap(), &context)) {
            *ii += v;
        }
        for (ii, b) in inter.iter_mut().zip(p.get("out.b_t").unwrap().data()) {
            *ii += b;
        }
        let inter: Vec<f64> = inter.iter().map(|v| v.tanh()).collect();
        let logits = matvec(p.get("out.w_t").unwrap(), &inter);
        total += log_softmax(&logits)[tok];
        prev = tok;
    }
    total
}

// ---------------------------------------------------------------------
// finite-difference gradient check
// ---------------------------------------------------------------------

/// Maximum relative error between analytic and central finite-difference
/// gradients of the batch NLL, over every parameter scalar.
pub fn gradient_max_rel_err(cfg: &ModelConfig, params: &ModelParams, batch: &Batch, step: f64) -> f64 {
    let mut tape = nmt_core::Tape::new();
    let bound = nmt_core::model::BoundModel::bind(&mut tape, params, cfg);
    let loss = nmt_core::training::nll_loss_var(&mut tape, &bound, batch).unwrap();
    let grads = tape.backward(loss).unwrap();
    let gmap = bound.extract_grads(&grads, params);

    let mut max_rel: f64 = 0.0;
    let mut work = params.clone();
    for (name, g) in &gmap {
        for idx in 0..g.len() {
            let orig = work.get(name).unwrap().data()[idx];
            work.get_mut(name).unwrap().data_mut()[idx] = orig + step;
            let up = nll_loss(&work, cfg, batch).unwrap();
            work.get_mut(name).unwrap().data_mut()[idx] = orig - step;
            let down = nll_loss(&work, cfg, batch).unwrap();
            work.get_mut(name).unwrap().data_mut()[idx] = orig;
            let fd = (up - down) / (2.0 * step);
            let a = g.data()[idx];
            let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-3);
            if rel > max_rel {
                max_rel = rel;
            }
        }
    }
    max_rel
}

// ---------------------------------------------------------------------
// copy-task utilities
// ---------------------------------------------------------------------

/// Synthetic copy pairs over the non-reserved vocabulary; targets can
/// have symbols flipped with probability `noise`.
pub fn copy_pairs(
    n: usize,
    vocab: usize,
    len_range: std::ops::RangeInclusive<usize>,
    noise: f64,
    seed: u64,
) -> Vec<Pair> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let symbols = vocab - RESERVED_TOKENS;
    (0..n)
        .map(|_| {
            let len = rng.gen_range(*len_range.start()..=*len_range.end());
            let src: Vec<usize> = (0..len).map(|_| RESERVED_TOKENS + rng.gen_range(0..symbols)).collect();
            let tgt: Vec<usize> = src
                .iter()
                .map(|&t| {
                    if noise > 0.0 && rng.gen_bool(noise) {
                        RESERVED_TOKENS + rng.gen_range(0..symbols)
                    } else {
                        t
                    }
                })
                .collect();
            (src, tgt)
        })
        .collect()
}

/// Greedy decode (beam 1) of one source, end symbol stripped.
pub fn greedy_decode(spec: &EnsembleSpec, src: &[usize]) -> Vec<usize> {
    let hyp = &beam_search(spec, src, 1, 1, 2).unwrap()[0];
    hyp.tokens.iter().copied().filter(|&t| t != EOS_ID).collect()
}

/// Beam decode top-1 token ids, end symbol stripped.
pub fn beam_decode(spec: &EnsembleSpec, src: &[usize], beam: usize) -> Vec<usize> {
    let hyp = &beam_search(spec, src, beam, 1, 2).unwrap()[0];
    hyp.tokens.iter().copied().filter(|&t| t != EOS_ID).collect()
}

/// Token ids rendered as a whitespace line (for BLEU scoring).
pub fn ids_to_line(ids: &[usize]) -> String {
    ids.iter().map(|t| format!("t{}", t)).collect::<Vec<_>>().join(" ")
}
