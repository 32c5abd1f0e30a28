//! Efficient mixture-of-softmaxes output layers through learned word codes.
//!
//! The crate is organised bottom-up:
//!
//! - [`corpus`]: whitespace tokenization and frequency-ordered vocabularies.
//! - [`bpe`]: byte pair encoding trainer, encoder and decoder.
//! - [`codetable`]: the hybrid frequent-word / (row, column) code table and
//!   encoded-corpus likelihood.
//! - [`codelm`]: a small recurrent language model over code sequences.
//! - [`assign`]: assignment cost matrices, exact and greedy solvers, and the
//!   alternating table-learning loop.
//! - [`mos`]: softmax and mixture-of-softmaxes evaluation, fitting, and
//!   numerical-rank analysis.
//! - [`bench`]: time and memory scaling of output layers.
//!
//! Data-parallel inner loops go through [`exec`]. With the `parallel` feature
//! (on by default) they fan out over rayon; otherwise they run sequentially.
//! Both paths reduce partial results in a fixed order, so outputs are
//! bit-identical either way.

pub mod assign;
pub mod bench;
pub mod bpe;
pub mod codelm;
pub mod codetable;
pub mod corpus;
pub mod error;
pub mod exec;
pub mod linalg;
pub mod mos;

pub use error::{Error, Result};
pub use exec::Parallelism;
