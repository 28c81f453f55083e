//! Staged text-to-image generation in a vector-quantized latent space.
//!
//! The pipeline has four trainable pieces and a benchmark surface:
//!
//! * [`nn`] — a small dense-tensor reverse-mode autodiff core with the layers
//!   and the AdamW optimizer everything else is built on.
//! * [`tokenizer`] — a toy VQ image tokenizer (encoder, codebook with EMA
//!   maintenance, decoder) that turns 32×32 images into 64 discrete tokens and
//!   reports a per-token quantization error used to rank generation difficulty.
//! * [`synth`] — a procedural prompt→image dataset over a closed attribute
//!   grammar, with an exact template-matching oracle so image/text alignment
//!   is measurable without a pretrained captioner.
//! * [`schedule`] — stage plans and state sequences: every token position is
//!   assigned to one of `T` generation stages, and training tuples are
//!   materialized per stage, optionally corrupted with pseudo error tokens so
//!   the model learns to revise earlier mistakes.
//! * [`model`] — a non-causal encoder-decoder sequence model with two heads:
//!   a token head over the codebook and a per-position state head over
//!   {unchanged, generate, replace}.
//! * [`policy`] — a REINFORCE-trained position-scoring policy that learns
//!   which positions to generate at each stage.
//! * [`engine`] — the staged parallel decoder with revision, the toy Fréchet
//!   metric, and the order / stage-count / error-injection benchmark harnesses.
//!
//! See the `examples/` directory for one runnable program per capability; the
//! `vqstage` binary exposes the same flows as subcommands.

pub mod config;
pub mod engine;
pub mod error;
pub mod image;
pub mod model;
pub mod nn;
pub mod policy;
pub mod schedule;
pub mod synth;
pub mod tokenizer;

pub use error::{Error, Result};

/// Sentinel id for a not-yet-generated position in a token grid.
///
/// Real codebook ids live in `[0, K)` with `K` far below the sentinel; the
/// mask is an input symbol only and is never a prediction target.
pub const MASK_TOKEN: u16 = u16::MAX;

/// Token id type used for vector-quantized image tokens.
pub type TokenId = u16;
