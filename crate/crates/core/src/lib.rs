//! Structured meta-learning for conditional sequence-to-sequence generation.
//!
//! The crate is organized bottom-up:
//!
//! - [`autodiff`] — a minimal reverse-mode tape engine (tensors, graph,
//!   parameter stores) sufficient for LSTM seq2seq training with
//!   first-order meta-gradients.
//! - [`data`] — corpus ingestion, vocabulary, task partitioning, batching,
//!   and a synthetic clustered task-family generator.
//! - [`model`] — the condition-aware encoder-decoder (BiLSTM encoder,
//!   condition-augmented LSTM decoder with soft attention, beam search).
//! - [`structure`] — task representation via gated self-attention over the
//!   condition embedding table plus parameter gating of the decoder set.
//! - [`meta`] — training regimes (MTL, first-order MAML, SML), task-specific
//!   adaptation with fine-tuning-step accounting, and the experiment runner.
//! - [`eval`] — perplexity, BLEU-1/2, Distinct-1/2, and the self-attention
//!   heatmap export.

pub mod autodiff;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod meta;
pub mod model;
pub mod structure;

/// Global float precision for all numeric state. 64-bit keeps gradient
/// checks reliable; swap the alias to change precision crate-wide.
pub type Float = f64;

pub use autodiff::{clip_grad_norm, sgd_step, Graph, ParamStore, ParamView, Primitive, Tensor};
pub use error::{Error, Result};
