//! Tooling for measuring what (near-)duplicate subwords cost a language model.
//!
//! The crate is organised bottom-up:
//!
//! - [`vocab`]: subword vocabularies and their on-disk formats.
//! - [`kappa`]: deduplication mappings (whitespace / case / plural rules and
//!   synthetic duplication) and near-duplicate statistics.
//! - [`corpus`]: a minimal BPE tokenizer, binary token streams and the
//!   duplicate / deduplicate / flag transforms over them.
//! - [`lm`]: a small decoder-only transformer with hand-written backward pass.
//! - [`eval`]: sliding-window surprisal records and projected perplexity.
//! - [`theory`]: exact entropy and mutual-information bookkeeping over
//!   enumerable sequence distributions.
//! - [`analysis`]: similarity studies, surprisal deltas, power-law fits and
//!   Welch's t-test.

// NaN-rejecting checks are written as `!(x > 0.0)` on purpose.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analysis;
pub mod corpus;
pub mod eval;
pub mod kappa;
pub mod lm;
pub mod rng;
pub mod theory;
pub mod vocab;

pub use kappa::{DedupMap, DupScheme, Rule, RuleFlags};
pub use vocab::{Marker, VocabFormat, Vocabulary};

/// Version string embedded in every artifact.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
