//! Attention-based encoder-decoder NMT toolkit.
//!
//! A from-scratch recurrent neural machine translation stack: a small
//! reverse-mode autodiff tape, GRU/LSTM units, deep stacked and deep
//! transition architectures with additive attention, BPE subwords,
//! mini-batch training with Adam, ensemble beam search, n-gram LM
//! re-ranking, and BLEU/bootstrap evaluation.

pub mod bpe;
pub mod decoding;
pub mod error;
pub mod eval;
pub mod lm;
pub mod model;
pub mod pipeline;
pub mod rerank;
pub mod rnn;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::{Tape, Tensor, Var};
