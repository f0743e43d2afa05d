//! Multilingual translation pre-training with random aligned substitution,
//! implemented end to end at desk scale.
//!
//! The crate is organised as a pipeline:
//!
//! - [`corpus`]: parallel corpora, language indicator tokens, manifests and
//!   the directed training pool.
//! - [`subword`]: joint BPE with per-language oversampling and the shared
//!   vocabulary.
//! - [`ras`]: bilingual dictionaries and the code-switching substitution
//!   applied to source sentences.
//! - [`model`]: a small pre-norm transformer encoder-decoder in `f64` with
//!   hand-written backpropagation and beam search.
//! - [`trainer`]: learning-rate schedule, Adam, pre-training over the pool,
//!   fine-tuning and checkpoints.
//! - [`analysis`]: aligned-word cosine similarity, PCA projection and BLEU.
//! - [`synthlab`]: synthetic language families with ground-truth
//!   dictionaries and the paired experiment harness.

pub mod analysis;
pub mod corpus;
pub mod model;
pub mod ras;
pub mod seeding;
pub mod subword;
pub mod synthlab;
pub mod trainer;

mod error;

pub use error::{Error, Result};
