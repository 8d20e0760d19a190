//! Greedy consecutive decoding with cached keys and values.

use serde::{Deserialize, Serialize};

use super::network::{AttnIds, Forward, LinearIds, Model, NormIds, LN_EPS};
use super::ModelError;
use crate::corpus::Vocabulary;
use crate::ctc::{argmax, ctc_greedy_decode};
use crate::tensor::kernels::{add_row_inplace, layer_norm_rows, matmul, softmax_rows};
use crate::tensor::nn::sinusoidal_positions;
use crate::tensor::{Tape, Tensor};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecodeResult {
    /// Every emitted id, starting with `<asr>` and ending with `<eos>` unless truncated.
    pub raw: Vec<usize>,
    /// Index in `raw` of the first `<st>`.
    pub st_position: Option<usize>,
    pub transcript: Vec<usize>,
    pub translation: Vec<usize>,
    pub missing_st: bool,
    /// `<st>` tokens after the first one; they stay inside `translation`.
    pub extra_st: usize,
    /// Stopped at `max_decode_len` without `<eos>`.
    pub truncated: bool,
    /// Collapsed greedy CTC labels.
    pub phonemes: Vec<usize>,
    /// Rows of the decoder memory.
    pub memory_len: usize,
}

impl DecodeResult {
    /// Rebuilds the raw sequence from the two segments and the flags.
    pub fn reconstruct(&self, vocab: &Vocabulary) -> Vec<usize> {
        let mut s = vec![vocab.asr()];
        s.extend_from_slice(&self.transcript);
        if !self.missing_st {
            s.push(vocab.st());
            s.extend_from_slice(&self.translation);
        }
        if !self.truncated {
            s.push(vocab.eos());
        }
        s
    }
}

/// Splits an emitted sequence `[<asr>, z…, <st>, y…, <eos>]` at its first `<st>`.
/// Without `<st>` every token counts as transcript.
pub fn split_consecutive(raw: &[usize], vocab: &Vocabulary) -> DecodeResult {
    let start = usize::from(raw.first() == Some(&vocab.asr()));
    let truncated = raw.last() != Some(&vocab.eos()) || raw.len() <= start;
    let end = if truncated { raw.len() } else { raw.len() - 1 };
    let body = &raw[start..end.max(start)];
    let st = body.iter().position(|&t| t == vocab.st());
    let (transcript, translation) = match st {
        Some(i) => (body[..i].to_vec(), body[i + 1..].to_vec()),
        None => (body.to_vec(), Vec::new()),
    };
    let extra_st = translation.iter().filter(|&&t| t == vocab.st()).count();
    DecodeResult {
        raw: raw.to_vec(),
        st_position: st.map(|i| i + start),
        transcript,
        translation,
        missing_st: st.is_none(),
        extra_st,
        truncated,
        phonemes: Vec::new(),
        memory_len: 0,
    }
}

struct Cached {
    k: Vec<f64>,
    v: Vec<f64>,
    rows: usize,
}

fn project(model: &Model, x: &[f64], rows: usize, ids: LinearIds) -> Vec<f64> {
    let w = model.value(ids.w);
    let (k, n) = (w.rows(), w.cols());
    let mut y = matmul(rows, k, n, x, w.data(), false);
    add_row_inplace(&mut y, model.value(ids.b).data());
    y
}

fn norm(model: &Model, x: &[f64], ids: NormIds) -> Vec<f64> {
    let d = x.len();
    layer_norm_rows(x, d, model.value(ids.g).data(), model.value(ids.b).data(), LN_EPS).0
}

/// One query row against cached keys/values, all heads, output-projected.
fn attend(model: &Model, q: &[f64], cache: &Cached, ids: &AttnIds) -> Vec<f64> {
    let d = q.len();
    let heads = model.config().heads;
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut cat = vec![0.0; d];
    let mut scores = vec![0.0; cache.rows];
    for h in 0..heads {
        let qh = &q[h * dh..(h + 1) * dh];
        for (j, s) in scores.iter_mut().enumerate() {
            let kj = &cache.k[j * d + h * dh..j * d + (h + 1) * dh];
            *s = qh.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale;
        }
        let p = softmax_rows(&scores, cache.rows, None);
        let out = &mut cat[h * dh..(h + 1) * dh];
        for (j, pj) in p.iter().enumerate() {
            let vj = &cache.v[j * d + h * dh..j * d + (h + 1) * dh];
            for (o, v) in out.iter_mut().zip(vj) {
                *o += pj * v;
            }
        }
    }
    project(model, &cat, 1, ids.o)
}

/// Runs the AS phase and then decodes greedily from `<asr>` until `<eos>`
/// or `max_decode_len` tokens (counting `<asr>`).
pub fn greedy_consecutive_decode(model: &Model, vocab: &Vocabulary, x: &Tensor) -> Result<DecodeResult, ModelError> {
    if vocab.output_size() != model.config().vocab_size {
        return Err(ModelError::Mismatch(format!(
            "vocabulary has {} tokens, model expects {}",
            vocab.output_size(),
            model.config().vocab_size
        )));
    }
    let mut tape = Tape::new();
    let p = model.bind(&mut tape, |_| false);
    let as_out = model.as_forward(&mut tape, &p, x, &mut Forward::eval())?;
    let (_, phonemes) = ctc_greedy_decode(tape.value(as_out.ctc_log_probs));
    let memory = tape.value(as_out.h_as).clone();
    let mut result = split_consecutive(&greedy_from_memory(model, vocab, &memory), vocab);
    result.phonemes = phonemes;
    result.memory_len = memory.rows();
    Ok(result)
}

/// Decoder state for one utterance: cross-attention keys/values are
/// computed once, self-attention keys/values grow by one row per step.
pub(crate) struct Incremental<'m> {
    model: &'m Model,
    cross: Vec<Cached>,
    selfs: Vec<Cached>,
    pe: Tensor,
    pos: usize,
}

impl<'m> Incremental<'m> {
    pub(crate) fn new(model: &'m Model, memory: &Tensor) -> Self {
        let layout = &model.layout;
        let cross = layout
            .dec
            .iter()
            .map(|l| Cached {
                k: project(model, memory.data(), memory.rows(), l.cross.k),
                v: project(model, memory.data(), memory.rows(), l.cross.v),
                rows: memory.rows(),
            })
            .collect();
        let selfs = layout
            .dec
            .iter()
            .map(|_| Cached {
                k: Vec::new(),
                v: Vec::new(),
                rows: 0,
            })
            .collect();
        let cfg = model.config();
        Self {
            model,
            cross,
            selfs,
            pe: sinusoidal_positions(cfg.max_decode_len, cfg.d_model),
            pos: 0,
        }
    }

    /// Feeds the token at the next position and returns the logits for the one after it.
    pub(crate) fn step(&mut self, tok: usize) -> Vec<f64> {
        let model = self.model;
        let layout = &model.layout;
        let d = model.config().d_model;
        let mut h: Vec<f64> = model
            .value(layout.embed)
            .row(tok)
            .iter()
            .zip(self.pe.row(self.pos))
            .map(|(e, q)| e * (d as f64).sqrt() + q)
            .collect();
        self.pos += 1;
        for (l, (sc, cc)) in layout.dec.iter().zip(self.selfs.iter_mut().zip(&self.cross)) {
            let a = norm(model, &h, l.ln1);
            let q = project(model, &a, 1, l.self_attn.q);
            sc.k.extend(project(model, &a, 1, l.self_attn.k));
            sc.v.extend(project(model, &a, 1, l.self_attn.v));
            sc.rows += 1;
            let o = attend(model, &q, sc, &l.self_attn);
            h.iter_mut().zip(&o).for_each(|(x, y)| *x += y);
            let c = norm(model, &h, l.ln2);
            let q = project(model, &c, 1, l.cross.q);
            let o = attend(model, &q, cc, &l.cross);
            h.iter_mut().zip(&o).for_each(|(x, y)| *x += y);
            let f = norm(model, &h, l.ln3);
            let mut f = project(model, &f, 1, l.ff1);
            f.iter_mut().for_each(|v| *v = v.max(0.0));
            let o = project(model, &f, 1, l.ff2);
            h.iter_mut().zip(&o).for_each(|(x, y)| *x += y);
        }
        let h = norm(model, &h, layout.dec_ln);
        project(model, &h, 1, layout.out)
    }
}

/// Greedy decoding against a fixed memory, returning the raw emitted ids.
pub(crate) fn greedy_from_memory(model: &Model, vocab: &Vocabulary, memory: &Tensor) -> Vec<usize> {
    let max_len = model.config().max_decode_len;
    let mut dec = Incremental::new(model, memory);
    let mut raw = vec![vocab.asr()];
    while raw.len() < max_len {
        let next = argmax(&dec.step(raw[raw.len() - 1]));
        raw.push(next);
        if next == vocab.eos() {
            break;
        }
    }
    raw
}
