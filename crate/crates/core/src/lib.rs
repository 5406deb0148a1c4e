//! Non-autoregressive text-to-speech built from a semantic aligner, a
//! flow-matching condition encoder and velocity decoder, an auxiliary CTC
//! head, and an Euler sampler with classifier-free guidance and shared
//! encoder features.
//!
//! Audio is replaced by a synthetic invertible latent codec ([`codec`]), so
//! content recovery can be measured exactly as a token error rate.

pub mod aligner;
pub mod cli;
pub mod codec;
pub mod ctc;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod model;
pub mod nn;
pub mod numerics;
pub mod rng;
pub mod sampler;
pub mod training;

pub use error::{Error, Result};
