//! Training and decoding laboratory for sequence-to-sequence models where a
//! generator network is taught, through a differentiable relaxation of
//! discrete word choices, to emit translations that score highly under a
//! likelihood discriminator.
//!
//! The crate is organized bottom-up:
//! - [`tensor`]: dense f64 tensors on a reverse-mode differentiation tape
//! - [`model`]: GRU encoder-decoder with additive attention
//! - [`gumbel`]: noise sampling, relaxed tokens, straight-through
//!   estimators, and top-down noise inference
//! - [`decoding`]: greedy, sampling, and beam decoders plus the noise-paired
//!   decode used during generator training
//! - [`training`]: teacher forcing, policy-gradient fine-tuning, and the
//!   alternating generator/discriminator loop
//! - [`metrics`]: BLEU and likelihood evaluation
//! - [`data`]: vocabularies, corpora, batching, synthetic tasks
//! - [`checkpoint`]: versioned binary model snapshots

pub mod checkpoint;
pub mod data;
pub mod decoding;
pub mod error;
pub mod gumbel;
pub mod metrics;
pub mod model;
pub mod rng;
pub mod stats;
pub mod tensor;
pub mod training;

pub use error::{GgdError, Result};
