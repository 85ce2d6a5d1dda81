//! Streamable MDCT-domain neural audio codec with residual scalar-vector
//! quantization.
//!
//! The crate wires a lapped cosine transform, a causal convolutional
//! encoder/decoder pair, a residual scalar-vector quantizer and a bit-exact
//! token bitstream into a low-latency codec that can be trained at desk
//! scale and verified end to end. The guide under `book/` walks through the
//! concepts chapter by chapter; its code snippets compile and run as part of
//! `cargo test --doc`.

pub mod error;
pub mod bitstream;
pub mod codebook;
pub mod config;
pub mod corpus;
pub mod mdct;
pub mod neural;
pub mod rsvq;

pub use config::CodecConfig;
pub use error::{CodecError, Result};
