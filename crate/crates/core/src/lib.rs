//! Contrastive pretraining of a context encoder and a relation encoder with
//! label-agnostic and label-aware semantic mapping, followed by supervised,
//! few-shot, and zero-shot relation-extraction fine-tuning and evaluation.

// `!(x > 0.0)` deliberately rejects NaN along with non-positive values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod corpus;
pub mod encoder;
pub mod error;
pub mod gradsuite;
pub mod objectives;
pub mod sampling;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};

use rand::SeedableRng;

/// Deterministic generator used everywhere a seed is configured.
pub type Rng = rand_chacha::ChaCha8Rng;

pub fn seeded_rng(seed: u64) -> Rng {
    Rng::seed_from_u64(seed)
}
