//! The two-phase network.
//!
//! The acoustic-semantic (AS) phase down-samples stacked features, projects
//! them to the model width and runs pre-shrink transformer blocks; a CTC head
//! reads the result, shrinking compresses it to roughly one state per
//! phoneme, and post-shrink blocks produce the decoder memory. The
//! transcription-translation (TT) phase is one causal decoder over
//! `<asr> z <st> y <eos>` with cross-attention to that memory.

mod decode;
mod network;
mod params;

pub use decode::{greedy_consecutive_decode, split_consecutive, DecodeResult};
pub use network::{AsOutput, Bound, Forward, Model};
pub use params::{ParamGroup, ParamStore};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::Vocabulary;
use crate::tensor::checkpoint::CheckpointError;
use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("decoder prefix has {len} tokens, limit is {max}")]
    PrefixTooLong { len: usize, max: usize },
    #[error("decoder prefix must start with <asr>")]
    BadPrefix,
    #[error("input has {rows} frames, nothing left after down-sampling")]
    EmptyInput { rows: usize },
    #[error("input has {got} feature columns, model expects {want}")]
    InputWidth { got: usize, want: usize },
    #[error("checkpoint does not match the model: {0}")]
    Mismatch(String),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    pub heads: usize,
    pub pre_shrink_layers: usize,
    pub post_shrink_layers: usize,
    pub decoder_layers: usize,
    pub ffn_dim: usize,
    pub dropout: f64,
    pub max_decode_len: usize,
    pub downsample_rate: usize,
    /// Width `d_feat` of the raw feature frames.
    pub feature_dim: usize,
    /// Frames to the right stacked onto each input frame.
    pub right_context: usize,
    /// `|V|`; the CTC head has `|V| + 1` outputs, the last being blank.
    pub vocab_size: usize,
    /// Disable to feed the un-shrunk pre-shrink states to the post-shrink blocks.
    pub shrink: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            heads: 4,
            pre_shrink_layers: 2,
            post_shrink_layers: 2,
            decoder_layers: 2,
            ffn_dim: 128,
            dropout: 0.1,
            max_decode_len: 500,
            downsample_rate: 3,
            feature_dim: 16,
            right_context: 5,
            vocab_size: 0,
            shrink: true,
        }
    }
}

impl ModelConfig {
    /// Base-transformer widths with a 12-layer AS phase (CTC after layer 6)
    /// and a 6-layer decoder.
    pub fn full_scale(feature_dim: usize, vocab_size: usize) -> Self {
        Self {
            d_model: 512,
            heads: 8,
            pre_shrink_layers: 6,
            post_shrink_layers: 6,
            decoder_layers: 6,
            ffn_dim: 2048,
            feature_dim,
            vocab_size,
            ..Self::default()
        }
    }

    /// Sizes the input and output layers for a vocabulary and raw feature width.
    pub fn for_vocab(mut self, vocab: &Vocabulary, feature_dim: usize) -> Self {
        self.vocab_size = vocab.output_size();
        self.feature_dim = feature_dim;
        self
    }

    /// Width of a stacked frame.
    pub fn input_dim(&self) -> usize {
        self.feature_dim * (1 + self.right_context)
    }

    pub fn ctc_size(&self) -> usize {
        self.vocab_size + 1
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::Config(m));
        if self.d_model == 0 || self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            return bad(format!(
                "d_model {} must be divisible by heads {}",
                self.d_model, self.heads
            ));
        }
        if self.pre_shrink_layers == 0 || self.post_shrink_layers == 0 || self.decoder_layers == 0 {
            return bad("all layer counts must be at least 1".into());
        }
        if self.ffn_dim == 0 || self.feature_dim == 0 {
            return bad("ffn_dim and feature_dim must be positive".into());
        }
        if self.max_decode_len < 2 {
            return bad(format!("max_decode_len must be ≥ 2, got {}", self.max_decode_len));
        }
        if self.downsample_rate == 0 {
            return bad("downsample_rate must be ≥ 1".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout must be in [0, 1), got {}", self.dropout));
        }
        if self.vocab_size < 5 {
            return bad(format!(
                "vocab_size {} is too small for the special tokens",
                self.vocab_size
            ));
        }
        Ok(())
    }
}

/// `[<asr>, z…, <st>, y…, <eos>]`.
pub fn consecutive_sequence(vocab: &Vocabulary, z: &[usize], y: &[usize]) -> Vec<usize> {
    let mut s = Vec::with_capacity(z.len() + y.len() + 3);
    s.push(vocab.asr());
    s.extend_from_slice(z);
    s.push(vocab.st());
    s.extend_from_slice(y);
    s.push(vocab.eos());
    s
}
