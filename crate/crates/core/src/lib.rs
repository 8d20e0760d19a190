//! Consecutive transcription and translation for end-to-end speech
//! translation, at a scale that trains on a laptop CPU.
//!
//! The pipeline: stacked acoustic features are down-sampled and encoded by
//! a transformer stack supervised with CTC on phonemes; the encoder states
//! are shrunk by dropping blank frames and averaging repeated-label runs,
//! re-encoded, and handed to a single decoder that emits
//! `<asr> transcript <st> translation <eos>` in one autoregressive pass.
//!
//! Everything numeric is built on [`tensor`], a small double-precision
//! reverse-mode autodiff tape.

pub mod config;
pub mod corpus;
pub mod ctc;
pub mod eval;
pub mod metrics;
pub mod model;
pub mod rng;
pub mod shrink;
pub mod tensor;
pub mod train;

mod error;

pub use error::{Error, Result};
