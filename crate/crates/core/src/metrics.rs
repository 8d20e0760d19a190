//! Corpus BLEU, word/phoneme error rates and shrink-length statistics.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::hash::Hash;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("reference {index} is empty, error rate undefined")]
    EmptyReference { index: usize },
    #[error("{hyps} hypotheses but {refs} references")]
    CountMismatch { hyps: usize, refs: usize },
    #[error("every reference is empty")]
    NoReference,
    #[error("no samples to aggregate")]
    Empty,
}

/// Minimal edit script counts between a reference and a hypothesis.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EditOps {
    pub distance: usize,
    pub substitutions: usize,
    pub insertions: usize,
    pub deletions: usize,
}

/// Levenshtein distance from `reference` to `hypothesis`. Deletions are
/// reference tokens missing from the hypothesis; insertions are extra
/// hypothesis tokens. Among minimal scripts, substitutions are preferred,
/// then deletions.
pub fn edit_distance<T: PartialEq>(reference: &[T], hypothesis: &[T]) -> EditOps {
    let (n, m) = (reference.len(), hypothesis.len());
    let w = m + 1;
    let mut dp = vec![0usize; (n + 1) * w];
    for i in 0..=n {
        dp[i * w] = i;
    }
    for (j, cell) in dp[..=m].iter_mut().enumerate() {
        *cell = j;
    }
    for i in 1..=n {
        for j in 1..=m {
            let sub = dp[(i - 1) * w + j - 1] + usize::from(reference[i - 1] != hypothesis[j - 1]);
            let del = dp[(i - 1) * w + j] + 1;
            let ins = dp[i * w + j - 1] + 1;
            dp[i * w + j] = sub.min(del).min(ins);
        }
    }
    let mut ops = EditOps {
        distance: dp[n * w + m],
        ..EditOps::default()
    };
    let (mut i, mut j) = (n, m);
    while i > 0 || j > 0 {
        let here = dp[i * w + j];
        if i > 0 && j > 0 {
            let same = reference[i - 1] == hypothesis[j - 1];
            if here == dp[(i - 1) * w + j - 1] + usize::from(!same) {
                ops.substitutions += usize::from(!same);
                i -= 1;
                j -= 1;
                continue;
            }
        }
        if i > 0 && here == dp[(i - 1) * w + j] + 1 {
            ops.deletions += 1;
            i -= 1;
        } else {
            ops.insertions += 1;
            j -= 1;
        }
    }
    ops
}

/// Error rate of one sample: distance over reference length.
pub fn error_rate<T: PartialEq>(reference: &[T], hypothesis: &[T]) -> Result<f64, MetricsError> {
    if reference.is_empty() {
        return Err(MetricsError::EmptyReference { index: 0 });
    }
    Ok(edit_distance(reference, hypothesis).distance as f64 / reference.len() as f64)
}

/// Corpus-level error rate (WER or PER): total edits over total reference
/// tokens, as a fraction. Samples with an empty reference are skipped and
/// counted.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusErrorRate {
    pub rate: f64,
    pub edits: usize,
    pub reference_tokens: usize,
    pub excluded: Vec<usize>,
}

pub fn corpus_error_rate<T: PartialEq>(
    references: &[Vec<T>],
    hypotheses: &[Vec<T>],
) -> Result<CorpusErrorRate, MetricsError> {
    if references.len() != hypotheses.len() {
        return Err(MetricsError::CountMismatch {
            hyps: hypotheses.len(),
            refs: references.len(),
        });
    }
    let mut edits = 0;
    let mut reference_tokens = 0;
    let mut excluded = Vec::new();
    for (i, (r, h)) in references.iter().zip(hypotheses).enumerate() {
        if r.is_empty() {
            excluded.push(i);
            continue;
        }
        edits += edit_distance(r, h).distance;
        reference_tokens += r.len();
    }
    if reference_tokens == 0 {
        return Err(MetricsError::NoReference);
    }
    Ok(CorpusErrorRate {
        rate: edits as f64 / reference_tokens as f64,
        edits,
        reference_tokens,
        excluded,
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum BleuSmoothing {
    /// Any zero n-gram precision makes the score 0.
    #[default]
    None,
    /// Adds one to matches and totals for orders above 1.
    AddOne,
}

fn ngram_counts<T: Eq + Hash>(tokens: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for g in tokens.windows(n) {
            *counts.entry(g).or_insert(0) += 1;
        }
    }
    counts
}

/// Corpus BLEU on a 0–100 scale with a single reference per sample.
pub fn corpus_bleu<T: Eq + Hash>(
    hypotheses: &[Vec<T>],
    references: &[Vec<T>],
    max_n: usize,
    smoothing: BleuSmoothing,
) -> Result<f64, MetricsError> {
    if hypotheses.len() != references.len() {
        return Err(MetricsError::CountMismatch {
            hyps: hypotheses.len(),
            refs: references.len(),
        });
    }
    if references.iter().all(Vec::is_empty) {
        return Err(MetricsError::NoReference);
    }
    let mut matches = vec![0usize; max_n];
    let mut totals = vec![0usize; max_n];
    let (mut hyp_len, mut ref_len) = (0usize, 0usize);
    for (h, r) in hypotheses.iter().zip(references) {
        hyp_len += h.len();
        ref_len += r.len();
        for n in 1..=max_n {
            let rc = ngram_counts(r, n);
            for (g, c) in ngram_counts(h, n) {
                matches[n - 1] += c.min(rc.get(g).copied().unwrap_or(0));
            }
            totals[n - 1] += h.len().saturating_sub(n - 1);
        }
    }
    if hyp_len == 0 {
        return Ok(0.0);
    }
    let mut log_p = 0.0;
    for n in 0..max_n {
        let (m, t) = match smoothing {
            BleuSmoothing::AddOne if n > 0 => (matches[n] as f64 + 1.0, totals[n] as f64 + 1.0),
            _ => (matches[n] as f64, totals[n] as f64),
        };
        if m == 0.0 || t == 0.0 {
            return Ok(0.0);
        }
        log_p += (m / t).ln() / max_n as f64;
    }
    let bp = if hyp_len > ref_len {
        0.0
    } else {
        1.0 - ref_len as f64 / hyp_len as f64
    };
    Ok(100.0 * (log_p + bp).exp())
}

/// Cumulative shares `P(err ≤ k)` for `k = 0..=9`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShrinkTable {
    pub cumulative: [f64; 10],
    pub samples: usize,
}

pub fn shrink_stats(errors: &[usize]) -> Result<ShrinkTable, MetricsError> {
    if errors.is_empty() {
        return Err(MetricsError::Empty);
    }
    let mut cumulative = [0.0; 10];
    for (k, c) in cumulative.iter_mut().enumerate() {
        *c = errors.iter().filter(|&&e| e <= k).count() as f64 / errors.len() as f64;
    }
    Ok(ShrinkTable {
        cumulative,
        samples: errors.len(),
    })
}

/// Evaluation summary. BLEU is on a 0–100 scale; WER and PER are percentages.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub samples: usize,
    pub bleu: f64,
    pub wer: f64,
    pub per: f64,
    /// Samples skipped by WER / PER because their reference was empty.
    pub wer_excluded: usize,
    pub per_excluded: usize,
    pub shrink_table: Option<ShrinkTable>,
}

impl EvalReport {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("plain data")
    }

    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "samples  {}", self.samples);
        let _ = writeln!(s, "BLEU     {:.2}", self.bleu);
        let _ = writeln!(s, "WER      {:.2}", self.wer);
        let _ = writeln!(s, "PER      {:.2}", self.per);
        if let Some(t) = &self.shrink_table {
            let head: Vec<String> = (0..10).map(|k| format!("{k:>5}")).collect();
            let row: Vec<String> = t.cumulative.iter().map(|p| format!("{p:>5.2}")).collect();
            let _ = writeln!(s, "|L-T_u| <= k");
            let _ = writeln!(s, "k      {}", head.join(""));
            let _ = writeln!(s, "P      {}", row.join(""));
        }
        s
    }
}
