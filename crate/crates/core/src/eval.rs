//! Decoding a corpus and scoring hypotheses against references.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Quadruple, Vocabulary};
use crate::metrics::{corpus_bleu, corpus_error_rate, shrink_stats, BleuSmoothing, EvalReport, MetricsError};
use crate::model::{greedy_consecutive_decode, Model, ModelError};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("{hyps} hypotheses but {refs} references")]
    CountMismatch { hyps: usize, refs: usize },
    #[error("line {line}: hypothesis id `{hyp}` does not match reference id `{reference}`")]
    IdMismatch {
        line: usize,
        hyp: String,
        reference: String,
    },
    #[error("no hypotheses to score")]
    Empty,
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecodeFlags {
    pub missing_st: bool,
    pub extra_st: usize,
    pub truncated: bool,
}

/// One decoded sample, serialized as a JSONL line by the CLI.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Hypothesis {
    pub id: String,
    pub transcript: Vec<String>,
    pub translation: Vec<String>,
    /// Collapsed greedy CTC output.
    pub phonemes: Vec<String>,
    pub flags: DecodeFlags,
    /// Rows of the shrunk memory; absent when shrinking is off.
    pub shrink_len: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Reference {
    pub id: String,
    pub transcript: Vec<String>,
    pub translation: Vec<String>,
    pub phonemes: Vec<String>,
}

impl From<&Quadruple> for Reference {
    fn from(q: &Quadruple) -> Self {
        Self {
            id: q.id.clone(),
            transcript: q.transcript.clone(),
            translation: q.translation.clone(),
            phonemes: q.phonemes.clone(),
        }
    }
}

pub fn decode_sample(model: &Model, vocab: &Vocabulary, sample: &Quadruple) -> Result<Hypothesis, ModelError> {
    let r = greedy_consecutive_decode(model, vocab, &sample.features)?;
    Ok(Hypothesis {
        id: sample.id.clone(),
        transcript: vocab.decode(&r.transcript),
        translation: vocab.decode(&r.translation),
        phonemes: vocab.decode(&r.phonemes),
        flags: DecodeFlags {
            missing_st: r.missing_st,
            extra_st: r.extra_st,
            truncated: r.truncated,
        },
        shrink_len: model.config().shrink.then_some(r.memory_len),
    })
}

pub fn decode_corpus(model: &Model, vocab: &Vocabulary, samples: &[Quadruple]) -> Result<Vec<Hypothesis>, ModelError> {
    samples.iter().map(|s| decode_sample(model, vocab, s)).collect()
}

/// Corpus BLEU-4 on translations, WER on transcripts, PER on phonemes and,
/// when every hypothesis carries a shrink length, the `|L − T_u|` table.
pub fn score(hyps: &[Hypothesis], refs: &[Reference]) -> Result<EvalReport, EvalError> {
    if hyps.len() != refs.len() {
        return Err(EvalError::CountMismatch {
            hyps: hyps.len(),
            refs: refs.len(),
        });
    }
    if hyps.is_empty() {
        return Err(EvalError::Empty);
    }
    for (i, (h, r)) in hyps.iter().zip(refs).enumerate() {
        if h.id != r.id {
            return Err(EvalError::IdMismatch {
                line: i + 1,
                hyp: h.id.clone(),
                reference: r.id.clone(),
            });
        }
    }
    let field = |f: fn(&Hypothesis) -> &Vec<String>| hyps.iter().map(|h| f(h).clone()).collect::<Vec<_>>();
    let reff = |f: fn(&Reference) -> &Vec<String>| refs.iter().map(|r| f(r).clone()).collect::<Vec<_>>();
    let bleu = corpus_bleu(
        &field(|h| &h.translation),
        &reff(|r| &r.translation),
        4,
        BleuSmoothing::None,
    )?;
    let wer = corpus_error_rate(&reff(|r| &r.transcript), &field(|h| &h.transcript))?;
    let per = corpus_error_rate(&reff(|r| &r.phonemes), &field(|h| &h.phonemes))?;
    let shrink_table = hyps
        .iter()
        .zip(refs)
        .map(|(h, r)| h.shrink_len.map(|l| l.abs_diff(r.phonemes.len())))
        .collect::<Option<Vec<_>>>()
        .map(|errors| shrink_stats(&errors))
        .transpose()?;
    Ok(EvalReport {
        samples: hyps.len(),
        bleu,
        wer: 100.0 * wer.rate,
        per: 100.0 * per.rate,
        wer_excluded: wer.excluded.len(),
        per_excluded: per.excluded.len(),
        shrink_table,
    })
}
