//! Temporal-consistency-aware residual motion tokenizer and masked
//! text-to-motion generator.
//!
//! Everything in this crate is pure computation over owned buffers and runs
//! under `no_std` with `alloc`. File formats, configuration and the command
//! line live in the `motok` crate.
#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod error;
pub mod evaluator;
pub mod gradcheck;
pub mod gradsuite;
pub mod kcb;
pub mod masked_gen;
pub mod metrics;
pub mod motion;
pub mod nn;
pub mod rng;
pub mod rvq;
pub mod synth;
pub mod tape;
pub mod tcc;
pub mod tensor;
pub mod text;
pub mod vqvae;

pub use error::{Error, Result};
pub use rng::Rng;
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
