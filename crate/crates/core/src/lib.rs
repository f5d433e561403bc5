//! Autoregressive generation with a continuous latent plan followed by
//! delay-interleaved multi-codebook tokens, on a synthetic audio world whose
//! every stage can be inverted and checked exactly.

pub mod error;
pub mod eval;
pub mod inference;
pub mod layout;
pub mod model;
pub mod numerics;
pub mod rng;
pub mod toyworld;
pub mod training;

#[cfg(test)]
mod testutil;

pub use error::{Error, Result};
