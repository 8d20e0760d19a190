//! Training data: synthetic speech-translation quadruples, manifest files,
//! feature stacking and the shared vocabulary.

mod manifest;
mod synth;
mod vocab;

pub use manifest::{load_manifest, load_text_pairs, save_manifest, save_text_pairs, sidecar_path, MANIFEST_VERSION};
pub use synth::{synth_generate, DictionarySpec, SynthConfig, SynthCorpus, Synthesizer, WORD_SEPARATOR};
pub use vocab::{build_vocab, Partition, Vocabulary, ASR, BLANK_TOKEN, EOS, PAD, ST};

use std::io;

use thiserror::Error;

use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("{path}: {source}")]
    Io { path: String, source: io::Error },
    #[error("{path}:{line}: bad field `{field}`: {msg}")]
    Malformed {
        path: String,
        line: usize,
        field: &'static str,
        msg: String,
    },
    #[error("feature file not found: {path}")]
    MissingFeatures { path: String },
    #[error("sample {id}: feature data truncated in {path}")]
    TruncatedFeatures { id: String, path: String },
    #[error("invalid synthesis config: {0}")]
    Config(String),
    #[error("unknown {partition} token `{token}`")]
    UnknownToken { partition: Partition, token: String },
    #[error("could only generate {got} of {wanted} distinct utterances")]
    Exhausted { got: usize, wanted: usize },
}

/// One speech-translation sample `(x, u, z, y)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Quadruple {
    pub id: String,
    /// Raw features, `T_raw × d_feat`.
    pub features: Tensor,
    pub phonemes: Vec<String>,
    pub transcript: Vec<String>,
    pub translation: Vec<String>,
}

/// One external text translation pair `(z′, y′)`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TextPair {
    pub source: Vec<String>,
    pub target: Vec<String>,
}

/// Concatenates each frame with the `right_context` frames after it,
/// zero-padding past the end: `T × d` becomes `T × d·(1 + right_context)`.
pub fn stack_frames(x: &Tensor, right_context: usize) -> Tensor {
    let (t, d) = (x.rows(), x.cols());
    let width = d * (1 + right_context);
    let mut out = vec![0.0; t * width];
    for row in 0..t {
        for k in 0..=right_context {
            let src = row + k;
            if src >= t {
                break;
            }
            out[row * width + k * d..row * width + (k + 1) * d].copy_from_slice(x.row(src));
        }
    }
    Tensor::matrix(t, width, out).expect("positive dims")
}
