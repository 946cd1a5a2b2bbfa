//! Context-aware conversational dense retrieval at desk scale.
//!
//! This crate is `no_std` (with `alloc`) and holds every algorithm: a small
//! reverse-mode autograd engine, a word-level dialogue tokenizer, a synthetic
//! conversational corpus generator, a decoder-only transformer with
//! query-focused pooling, the contrastive / intent-alignment / generation
//! objectives, dynamic history sampling, Adam training, exact cosine search
//! and ranking metrics. File formats, the CLI and anything touching the
//! filesystem live in the `convdr` companion crate.

#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod corpus;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod graph;
pub mod index;
pub mod losses;
pub mod model;
pub mod optim;
pub mod query_type;
pub mod sampler;
pub mod tensor;
pub mod tokenizer;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::{Scalar, Tensor};
