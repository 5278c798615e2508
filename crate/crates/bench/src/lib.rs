//! Shared fixtures for the criterion benchmarks.

use nmt_core::model::{init_params, Architecture, ModelConfig, ModelParams, Unit};
use nmt_core::training::{Batch, Pair};

/// Desk-scale model used across the benchmarks.
pub fn bench_config(arch: Architecture, unit: Unit) -> ModelConfig {
    ModelConfig {
        src_vocab: 50,
        tgt_vocab: 50,
        embed_dim: 32,
        hidden_dim: 64,
        unit,
        architecture: arch,
        enc_depth: 2,
        dec_depth: 2,
        enc_transitions: 2,
        dec_transitions: 3,
        align_dim: None,
        layer_norm: false,
        tied_embeddings: true,
    }
}

pub fn bench_model(arch: Architecture, unit: Unit) -> (ModelParams, ModelConfig) {
    let cfg = bench_config(arch, unit);
    (init_params(&cfg, 1).unwrap(), cfg)
}

/// Deterministic synthetic batch of `n` pairs with ~10-token sentences.
pub fn bench_batch(n: usize) -> Batch {
    let pairs: Vec<Pair> = (0..n)
        .map(|i| {
            let src: Vec<usize> = (0..10).map(|j| 3 + (i * 7 + j * 3) % 47).collect();
            let tgt: Vec<usize> = (0..10).map(|j| 3 + (i * 5 + j * 11) % 47).collect();
            (src, tgt)
        })
        .collect();
    Batch::from_pairs(&pairs)
}
