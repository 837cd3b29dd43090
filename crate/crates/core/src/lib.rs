//! Semi-supervised end-to-end speech-to-text training at desk scale.
//!
//! The library trains a hybrid CTC/attention encoder-decoder in which speech
//! and text are mapped into one shared embedding space, then improves a
//! small supervised model with unpaired data through four loss families:
//! a text autoencoder, a kernel two-sample (MMD) inter-domain loss, an
//! identity mapping loss, and a cycle-consistent inter-domain loss computed
//! through the model's own decoded hypotheses.
//!
//! Everything runs on a from-scratch reverse-mode autodiff over dense `f64`
//! tensors ([`autograd`]), on a synthetic corpus ([`corpus`]) small enough
//! that every mechanism can be verified against brute-force oracles.

pub mod autograd;
pub mod corpus;
pub mod decoder;
pub mod lm;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod seeds;
pub mod trainer;

mod error;

pub use error::{Error, Result};
