//! Mini-batch training: negative log-likelihood over padded batches,
//! gradient-norm clipping, Adam updates, and dev-loss early stopping
//! with periodic checkpoints.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{BoundModel, GradMap, ModelConfig, ModelParams, EOS_ID};
use crate::tensor::{Tape, Tensor};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub clip_norm: f64,
    pub checkpoint_interval: usize,
    pub patience: usize,
    pub max_len: usize,
    pub seed: u64,
    /// Safety cap for tests and desk-scale runs; dev-loss patience is the
    /// primary stopping criterion.
    pub max_updates: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 40,
            learning_rate: 1e-4,
            clip_norm: 1.0,
            checkpoint_interval: 10_000,
            patience: 10,
            max_len: 50,
            seed: 1,
            max_updates: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0
            || self.learning_rate <= 0.0
            || self.clip_norm <= 0.0
            || self.checkpoint_interval == 0
            || self.patience == 0
            || self.max_len == 0
        {
            return Err(Error::Config("all training fields must be positive".into()));
        }
        Ok(())
    }
}

/// One aligned sentence pair of token ids (no sentence markers).
pub type Pair = (Vec<usize>, Vec<usize>);

/// Padded mini-batch with per-position masks. Targets carry a trailing
/// end-of-sentence symbol before padding.
#[derive(Debug, Clone)]
pub struct Batch {
    pub src: Vec<Vec<usize>>,
    pub src_mask: Vec<Vec<bool>>,
    pub tgt: Vec<Vec<usize>>,
    pub tgt_mask: Vec<Vec<bool>>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.src.len()
    }

    pub fn is_empty(&self) -> bool {
        self.src.is_empty()
    }

    /// Build a batch from raw pairs, appending EOS and padding to the
    /// longest sentence of each side.
    pub fn from_pairs(pairs: &[Pair]) -> Batch {
        let max_s = pairs.iter().map(|(s, _)| s.len()).max().unwrap_or(0);
        let max_t = pairs.iter().map(|(_, t)| t.len() + 1).max().unwrap_or(0);
        let mut b = Batch { src: vec![], src_mask: vec![], tgt: vec![], tgt_mask: vec![] };
        for (s, t) in pairs {
            let mut src = s.clone();
            let mut sm = vec![true; s.len()];
            src.resize(max_s, 0);
            sm.resize(max_s, false);
            let mut tgt = t.clone();
            tgt.push(EOS_ID);
            let mut tm = vec![true; tgt.len()];
            tgt.resize(max_t, 0);
            tm.resize(max_t, false);
            b.src.push(src);
            b.src_mask.push(sm);
            b.tgt.push(tgt);
            b.tgt_mask.push(tm);
        }
        b
    }

    /// Source ids of pair `i` with padding stripped.
    pub fn real_src(&self, i: usize) -> &[usize] {
        let n = self.src_mask[i].iter().take_while(|&&m| m).count();
        &self.src[i][..n]
    }

    /// Target ids of pair `i` with padding stripped (end symbol kept).
    pub fn real_tgt(&self, i: usize) -> &[usize] {
        let n = self.tgt_mask[i].iter().take_while(|&&m| m).count();
        &self.tgt[i][..n]
    }
}

/// Deterministic per-(seed, epoch) shuffled batches. `weights`, when
/// given, repeats each pair logically without copying the corpus.
pub fn make_batches(corpus: &[Pair], size: usize, seed: u64, epoch: u64, weights: Option<&[u32]>) -> Result<Vec<Batch>> {
    if size == 0 {
        return Err(Error::Arg("batch size must be >= 1".into()));
    }
    if let Some(w) = weights {
        if w.len() != corpus.len() {
            return Err(Error::Dim("weights length differs from corpus length".into()));
        }
    }
    let mut indices: Vec<usize> = match weights {
        None => (0..corpus.len()).collect(),
        Some(w) => (0..corpus.len())
            .flat_map(|i| std::iter::repeat(i).take(w[i] as usize))
            .collect(),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ epoch.wrapping_mul(0x9e3779b97f4a7c15));
    indices.shuffle(&mut rng);
    Ok(indices
        .chunks(size)
        .map(|chunk| {
            let pairs: Vec<Pair> = chunk.iter().map(|&i| corpus[i].clone()).collect();
            Batch::from_pairs(&pairs)
        })
        .collect())
}

pub fn nll_loss_var(tape: &mut Tape, bound: &BoundModel, batch: &Batch) -> Result<crate::tensor::Var> {
    if batch.is_empty() {
        return Err(Error::Arg("empty batch".into()));
    }
    let mut total = None;
    for i in 0..batch.len() {
        let lp = bound.sentence_logprob_var(tape, batch.real_src(i), batch.real_tgt(i))?;
        total = Some(match total {
            None => lp,
            Some(t) => tape.add(t, lp)?,
        });
    }
    Ok(tape.scale(total.unwrap(), -1.0 / batch.len() as f64))
}

/// Mean per-pair negative log-likelihood of a batch.
pub fn nll_loss(params: &ModelParams, cfg: &ModelConfig, batch: &Batch) -> Result<f64> {
    let mut tape = Tape::new();
    let bound = BoundModel::bind(&mut tape, params, cfg);
    let loss = nll_loss_var(&mut tape, &bound, batch)?;
    tape.value(loss).item()
}

/// Global L2 norm of a gradient map.
pub fn grad_norm(grads: &GradMap) -> f64 {
    grads
        .values()
        .map(|t| t.data().iter().map(|x| x * x).sum::<f64>())
        .sum::<f64>()
        .sqrt()
}

/// Scale all gradients so the global norm does not exceed `max_norm`.
/// Returns the pre-clip norm.
pub fn clip_gradients(grads: &mut GradMap, max_norm: f64) -> f64 {
    let norm = grad_norm(grads);
    if norm > max_norm {
        let s = max_norm / norm;
        for t in grads.values_mut() {
            for v in t.data_mut() {
                *v *= s;
            }
        }
    }
    norm
}

/// Adam moments, one pair per parameter, plus the shared step counter.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: GradMap,
    v: GradMap,
    pub t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(params: &ModelParams) -> Self {
        let mut m = GradMap::new();
        let mut v = GradMap::new();
        for (name, t) in params.iter() {
            m.insert(name.clone(), Tensor::zeros(t.shape()));
            v.insert(name.clone(), Tensor::zeros(t.shape()));
        }
        AdamState { m, v, t: 0, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// One bias-corrected Adam step.
pub fn adam_update(st: &mut AdamState, params: &mut ModelParams, grads: &GradMap, lr: f64) -> Result<()> {
    st.t += 1;
    let bc1 = 1.0 - st.beta1.powi(st.t as i32);
    let bc2 = 1.0 - st.beta2.powi(st.t as i32);
    for (name, g) in grads {
        let p = params
            .get_mut(name)
            .ok_or_else(|| Error::Arg(format!("gradient for unknown parameter {name}")))?;
        if p.shape() != g.shape() {
            return Err(Error::Dim(format!("gradient shape mismatch for {name}")));
        }
        let m = st.m.get_mut(name).unwrap();
        let v = st.v.get_mut(name).unwrap();
        for ((pv, gv), (mv, vv)) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut().iter_mut().zip(v.data_mut().iter_mut()))
        {
            *mv = st.beta1 * *mv + (1.0 - st.beta1) * gv;
            *vv = st.beta2 * *vv + (1.0 - st.beta2) * gv * gv;
            let mhat = *mv / bc1;
            let vhat = *vv / bc2;
            *pv -= lr * mhat / (vhat.sqrt() + st.eps);
        }
    }
    Ok(())
}

/// Stops after `patience` consecutive checkpoints without a new minimum.
#[derive(Debug, Clone)]
pub struct EarlyStopper {
    patience: usize,
    best: f64,
    since_best: usize,
}

impl EarlyStopper {
    pub fn new(patience: usize) -> Self {
        EarlyStopper { patience, best: f64::INFINITY, since_best: 0 }
    }

    pub fn best(&self) -> f64 {
        self.best
    }

    /// Feed one checkpoint loss; true means stop now.
    pub fn observe(&mut self, loss: f64) -> bool {
        if loss < self.best {
            self.best = loss;
            self.since_best = 0;
            false
        } else {
            self.since_best += 1;
            self.since_best >= self.patience
        }
    }
}

/// Snapshot taken at a checkpoint; `train` returns the dev-loss minimum.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub params: ModelParams,
    pub config: ModelConfig,
    pub update_count: u64,
    pub dev_loss: f64,
}

/// Training loop with an injectable dev evaluation, so tests can script
/// the checkpoint loss sequence.
pub fn train_with_eval(
    mut params: ModelParams,
    cfg: &ModelConfig,
    corpus: &[Pair],
    weights: Option<&[u32]>,
    tc: &TrainConfig,
    mut eval: impl FnMut(&ModelParams) -> Result<f64>,
    mut report: impl FnMut(u64, f64, f64),
) -> Result<Checkpoint> {
    tc.validate()?;
    cfg.validate()?;
    if corpus.is_empty() {
        return Err(Error::Arg("empty training corpus".into()));
    }
    let mut adam = AdamState::new(&params);
    let mut stopper = EarlyStopper::new(tc.patience);
    let mut best: Option<Checkpoint> = None;
    let mut updates: u64 = 0;
    let mut epoch: u64 = 0;
    let mut last_train_loss: f64;
    'outer: loop {
        let batches = make_batches(corpus, tc.batch_size, tc.seed, epoch, weights)?;
        for batch in &batches {
            let mut tape = Tape::new();
            let bound = BoundModel::bind(&mut tape, &params, cfg);
            let loss = nll_loss_var(&mut tape, &bound, batch)?;
            last_train_loss = tape.value(loss).item()?;
            let grads = tape.backward(loss)?;
            let mut gmap = bound.extract_grads(&grads, &params);
            clip_gradients(&mut gmap, tc.clip_norm);
            adam_update(&mut adam, &mut params, &gmap, tc.learning_rate)?;
            updates += 1;

            if updates % tc.checkpoint_interval as u64 == 0 {
                let dev_loss = eval(&params)?;
                report(updates, last_train_loss, dev_loss);
                let improved = dev_loss < stopper.best();
                let stop = stopper.observe(dev_loss);
                if improved || best.is_none() {
                    best = Some(Checkpoint {
                        params: params.clone(),
                        config: cfg.clone(),
                        update_count: updates,
                        dev_loss,
                    });
                }
                if stop {
                    break 'outer;
                }
            }
            if let Some(cap) = tc.max_updates {
                if updates >= cap as u64 {
                    break 'outer;
                }
            }
        }
        epoch += 1;
    }
    // cap hit between checkpoints: snapshot the final state if nothing better
    Ok(best.unwrap_or(Checkpoint {
        params,
        config: cfg.clone(),
        update_count: updates,
        dev_loss: last_train_loss,
    }))
}

/// Full training run: dev loss is the batched NLL on `dev_corpus`.
pub fn train(
    params: ModelParams,
    cfg: &ModelConfig,
    corpus: &[Pair],
    weights: Option<&[u32]>,
    dev_corpus: &[Pair],
    tc: &TrainConfig,
    report: impl FnMut(u64, f64, f64),
) -> Result<Checkpoint> {
    if dev_corpus.is_empty() {
        return Err(Error::Arg("empty dev corpus".into()));
    }
    let dev_batches: Vec<Batch> = dev_corpus.chunks(tc.batch_size).map(Batch::from_pairs).collect();
    let cfg2 = cfg.clone();
    train_with_eval(
        params,
        cfg,
        corpus,
        weights,
        tc,
        move |p| {
            let mut total = 0.0;
            for b in &dev_batches {
                total += nll_loss(p, &cfg2, b)? * b.len() as f64;
            }
            Ok(total / dev_corpus.len() as f64)
        },
        report,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_params, sentence_logprob, Architecture, ModelConfig, Unit};

    fn tiny_cfg() -> ModelConfig {
        ModelConfig {
            src_vocab: 7,
            tgt_vocab: 7,
            embed_dim: 4,
            hidden_dim: 5,
            unit: Unit::Gru,
            architecture: Architecture::DeepStacked,
            enc_depth: 1,
            dec_depth: 1,
            enc_transitions: 1,
            dec_transitions: 2,
            align_dim: None,
            layer_norm: false,
            tied_embeddings: true,
        }
    }

    #[test]
    fn single_pair_loss_is_negated_logprob() {
        let cfg = tiny_cfg();
        let p = init_params(&cfg, 1).unwrap();
        let pair: Pair = (vec![3, 4], vec![4, 5]);
        let batch = Batch::from_pairs(&[pair.clone()]);
        let loss = nll_loss(&p, &cfg, &batch).unwrap();
        let mut y = pair.1.clone();
        y.push(EOS_ID);
        let lp = sentence_logprob(&p, &cfg, &pair.0, &y).unwrap();
        assert!((loss + lp).abs() < 1e-12);
        assert!(loss >= 0.0);
    }

    #[test]
    fn uniform_model_loss_is_length_times_log_vocab() {
        let mut cfg = tiny_cfg();
        cfg.tied_embeddings = false;
        let mut p = init_params(&cfg, 1).unwrap();
        let shape = p.get("out.w_t").unwrap().shape().to_vec();
        *p.get_mut("out.w_t").unwrap() = Tensor::zeros(&shape);
        let batch = Batch::from_pairs(&[(vec![3, 4], vec![4, 5, 6])]);
        let loss = nll_loss(&p, &cfg, &batch).unwrap();
        // 3 target tokens + EOS, each uniform over 7
        assert!((loss - 4.0 * (7.0f64).ln()).abs() < 1e-10);
    }

    #[test]
    fn duplicated_pair_keeps_mean_loss() {
        let cfg = tiny_cfg();
        let p = init_params(&cfg, 2).unwrap();
        let pair: Pair = (vec![3, 4], vec![5]);
        let one = nll_loss(&p, &cfg, &Batch::from_pairs(&[pair.clone()])).unwrap();
        let two = nll_loss(&p, &cfg, &Batch::from_pairs(&[pair.clone(), pair])).unwrap();
        assert!((one - two).abs() < 1e-12);
    }

    #[test]
    fn empty_batch_is_error() {
        let cfg = tiny_cfg();
        let p = init_params(&cfg, 2).unwrap();
        assert!(nll_loss(&p, &cfg, &Batch::from_pairs(&[])).is_err());
    }

    #[test]
    fn loss_invariant_to_padding_amount() {
        let cfg = tiny_cfg();
        let p = init_params(&cfg, 3).unwrap();
        let base = Batch::from_pairs(&[(vec![3, 4], vec![5]), (vec![5], vec![4, 6])]);
        // same logical batch, hand-padded wider
        let mut wide = base.clone();
        for i in 0..wide.len() {
            wide.src[i].extend([0, 0]);
            wide.src_mask[i].extend([false, false]);
            wide.tgt[i].extend([0, 0, 0]);
            wide.tgt_mask[i].extend([false, false, false]);
        }
        let a = nll_loss(&p, &cfg, &base).unwrap();
        let b = nll_loss(&p, &cfg, &wide).unwrap();
        assert!((a - b).abs() < 1e-10);
    }

    #[test]
    fn clip_scales_when_over_limit() {
        let mut g = GradMap::new();
        g.insert("a".into(), Tensor::vector(vec![2.0, 0.0]));
        let pre = clip_gradients(&mut g, 1.0);
        assert!((pre - 2.0).abs() < 1e-12);
        assert_eq!(g["a"].data(), &[1.0, 0.0]);

        let mut g2 = GradMap::new();
        g2.insert("a".into(), Tensor::vector(vec![0.5]));
        clip_gradients(&mut g2, 1.0);
        assert_eq!(g2["a"].data(), &[0.5]);
    }

    #[test]
    fn clip_norm_matches_independent_recompute() {
        let mut g = GradMap::new();
        g.insert("a".into(), Tensor::vector(vec![3.0, -1.5, 0.25]));
        g.insert("b".into(), Tensor::matrix(2, 2, vec![0.5, -2.0, 1.0, 0.75]).unwrap());
        let pre: f64 = g
            .values()
            .flat_map(|t| t.data().iter())
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt();
        let before: Vec<f64> = g.values().flat_map(|t| t.data().to_vec()).collect();
        clip_gradients(&mut g, 1.0);
        let post: f64 = g
            .values()
            .flat_map(|t| t.data().iter())
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt();
        assert!((post - pre.min(1.0)).abs() < 1e-9);
        // direction preserved: cosine similarity 1
        let after: Vec<f64> = g.values().flat_map(|t| t.data().to_vec()).collect();
        let dot: f64 = before.iter().zip(&after).map(|(x, y)| x * y).sum();
        let na: f64 = before.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb: f64 = after.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((dot / (na * nb) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn adam_first_step_is_signed_lr() {
        let mut params = ModelParams::default();
        params.insert("w".into(), Tensor::vector(vec![1.0, -2.0]));
        let mut st = AdamState::new(&params);
        let mut g = GradMap::new();
        g.insert("w".into(), Tensor::vector(vec![0.3, -0.7]));
        let lr = 0.01;
        adam_update(&mut st, &mut params, &g, lr).unwrap();
        let w = params.get("w").unwrap().data();
        assert!((w[0] - (1.0 - lr)).abs() < lr * 1e-6);
        assert!((w[1] - (-2.0 + lr)).abs() < lr * 1e-6);
        assert_eq!(st.t, 1);
    }

    #[test]
    fn adam_zero_gradient_only_ticks_counter() {
        let mut params = ModelParams::default();
        params.insert("w".into(), Tensor::vector(vec![1.5]));
        let mut st = AdamState::new(&params);
        let mut g = GradMap::new();
        g.insert("w".into(), Tensor::vector(vec![0.0]));
        adam_update(&mut st, &mut params, &g, 0.01).unwrap();
        assert_eq!(params.get("w").unwrap().data(), &[1.5]);
        assert_eq!(st.t, 1);
    }

    #[test]
    fn adam_trajectories_are_deterministic() {
        let run = || {
            let mut params = ModelParams::default();
            params.insert("w".into(), Tensor::scalar(0.4));
            let mut st = AdamState::new(&params);
            for i in 0..10 {
                let mut g = GradMap::new();
                g.insert("w".into(), Tensor::scalar(0.1 * (i as f64 + 1.0)));
                adam_update(&mut st, &mut params, &g, 0.003).unwrap();
            }
            params.get("w").unwrap().data()[0]
        };
        assert_eq!(run().to_bits(), run().to_bits());
    }

    #[test]
    fn batches_cover_corpus_with_remainder() {
        let corpus: Vec<Pair> = (0..100).map(|i| (vec![3 + i % 4], vec![3 + i % 4])).collect();
        let batches = make_batches(&corpus, 40, 7, 0, None).unwrap();
        let sizes: Vec<usize> = batches.iter().map(|b| b.len()).collect();
        assert_eq!(sizes, vec![40, 40, 20]);

        let singles = make_batches(&corpus, 1, 7, 0, None).unwrap();
        assert_eq!(singles.len(), 100);
    }

    #[test]
    fn batches_are_deterministic_per_seed_and_epoch() {
        let corpus: Vec<Pair> = (0..20).map(|i| (vec![3 + i % 4, 4], vec![3 + i % 4])).collect();
        let a = make_batches(&corpus, 4, 5, 0, None).unwrap();
        let b = make_batches(&corpus, 4, 5, 0, None).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.src, y.src);
            assert_eq!(x.tgt, y.tgt);
        }
        let c = make_batches(&corpus, 4, 5, 1, None).unwrap();
        assert!(a.iter().zip(&c).any(|(x, y)| x.src != y.src), "epochs should reshuffle");
    }

    #[test]
    fn early_stopper_contract() {
        let mut s = EarlyStopper::new(2);
        assert!(!s.observe(5.0));
        assert!(!s.observe(4.0));
        assert!(!s.observe(4.1));
        assert!(s.observe(4.2));
    }

    #[test]
    fn train_returns_minimum_dev_checkpoint() {
        // patience 2, scripted losses 5.0, 4.0, 4.1, 4.2 -> stop after
        // the 4th checkpoint, return checkpoint 2
        let cfg = tiny_cfg();
        let params = init_params(&cfg, 1).unwrap();
        let corpus: Vec<Pair> = vec![(vec![3, 4], vec![4, 3]); 8];
        let tc = TrainConfig {
            batch_size: 2,
            checkpoint_interval: 1,
            patience: 2,
            learning_rate: 1e-4,
            ..TrainConfig::default()
        };
        let script = [5.0, 4.0, 4.1, 4.2, 3.0];
        let mut calls = 0usize;
        let cp = train_with_eval(
            params,
            &cfg,
            &corpus,
            None,
            &tc,
            |_| {
                let v = script[calls];
                calls += 1;
                Ok(v)
            },
            |_, _, _| {},
        )
        .unwrap();
        assert_eq!(calls, 4, "stopped after the 4th checkpoint");
        assert_eq!(cp.update_count, 2);
        assert!((cp.dev_loss - 4.0).abs() < 1e-12);
    }

    #[test]
    fn train_cap_returns_final_checkpoint_on_improving_sequence() {
        let cfg = tiny_cfg();
        let params = init_params(&cfg, 1).unwrap();
        let corpus: Vec<Pair> = vec![(vec![3, 4], vec![4, 3]); 8];
        let tc = TrainConfig {
            batch_size: 2,
            checkpoint_interval: 1,
            patience: 10,
            max_updates: Some(3),
            ..TrainConfig::default()
        };
        let mut loss = 10.0;
        let cp = train_with_eval(
            params,
            &cfg,
            &corpus,
            None,
            &tc,
            |_| {
                loss -= 1.0;
                Ok(loss)
            },
            |_, _, _| {},
        )
        .unwrap();
        assert_eq!(cp.update_count, 3);
    }

    #[test]
    fn one_step_decreases_single_pair_loss() {
        let cfg = tiny_cfg();
        let mut params = init_params(&cfg, 4).unwrap();
        let batch = Batch::from_pairs(&[(vec![3, 4, 5], vec![5, 4])]);
        let before = nll_loss(&params, &cfg, &batch).unwrap();
        let mut tape = Tape::new();
        let bound = BoundModel::bind(&mut tape, &params, &cfg);
        let loss = nll_loss_var(&mut tape, &bound, &batch).unwrap();
        let grads = tape.backward(loss).unwrap();
        let mut gmap = bound.extract_grads(&grads, &params);
        clip_gradients(&mut gmap, 1.0);
        let mut adam = AdamState::new(&params);
        adam_update(&mut adam, &mut params, &gmap, 1e-4).unwrap();
        let after = nll_loss(&params, &cfg, &batch).unwrap();
        assert!(after < before, "{} !< {}", after, before);
    }

    #[test]
    fn empty_corpora_are_errors() {
        let cfg = tiny_cfg();
        let params = init_params(&cfg, 1).unwrap();
        let tc = TrainConfig::default();
        assert!(train(params.clone(), &cfg, &[], None, &[(vec![3], vec![3])], &tc, |_, _, _| {}).is_err());
        assert!(train(params, &cfg, &[(vec![3], vec![3])], None, &[], &tc, |_, _, _| {}).is_err());
    }
}
