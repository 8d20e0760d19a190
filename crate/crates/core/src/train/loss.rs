//! Training objectives as tape expressions.

use serde::{Deserialize, Serialize};

use super::TrainError;
use crate::ctc::ctc_loss;
use crate::tensor::{Tape, Var};

/// How token losses are reduced.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum LossNorm {
    /// Mean over target tokens (CTC: over phonemes).
    #[default]
    Mean,
    /// Sum over the tokens of each sequence, averaged over sequences in a batch.
    Sum,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossOptions {
    pub label_smoothing: f64,
    pub norm: LossNorm,
}

impl Default for LossOptions {
    fn default() -> Self {
        Self {
            label_smoothing: 0.1,
            norm: LossNorm::Mean,
        }
    }
}

impl LossOptions {
    pub fn exact() -> Self {
        Self {
            label_smoothing: 0.0,
            norm: LossNorm::Mean,
        }
    }
}

/// Summed negative log-likelihood of one sequence and the number of tokens it covers.
#[derive(Clone, Copy, Debug)]
pub struct LossTerm {
    pub sum: Var,
    pub tokens: usize,
}

impl LossTerm {
    fn reduce(self, tape: &mut Tape, norm: LossNorm) -> Var {
        match norm {
            LossNorm::Mean => tape.scale(self.sum, 1.0 / self.tokens as f64),
            LossNorm::Sum => self.sum,
        }
    }
}

/// Reduces terms from several sequences into one batch loss.
pub fn reduce_terms(tape: &mut Tape, terms: &[LossTerm], norm: LossNorm) -> Result<Option<Var>, TrainError> {
    if terms.is_empty() {
        return Ok(None);
    }
    let mut total = terms[0].sum;
    for t in &terms[1..] {
        total = tape.add(total, t.sum)?;
    }
    let denom = match norm {
        LossNorm::Mean => terms.iter().map(|t| t.tokens).sum::<usize>(),
        LossNorm::Sum => terms.len(),
    };
    Ok(Some(tape.scale(total, 1.0 / denom as f64)))
}

/// Cross-entropy of rows `rows` of `logits` against `targets`, with label
/// smoothing `eps`: each position costs `-(1-eps)·log p(target) - eps/|V|·Σ log p`.
fn ce_rows(
    tape: &mut Tape,
    logits: Var,
    rows: std::ops::Range<usize>,
    targets: &[usize],
    eps: f64,
) -> Result<LossTerm, TrainError> {
    let lp = tape.log_softmax(logits);
    let (n, v) = (tape.value(lp).rows(), tape.value(lp).cols());
    debug_assert!(rows.end <= n && rows.len() == targets.len());
    let index: Vec<Option<usize>> = rows.clone().zip(targets).map(|(r, &t)| Some(r * v + t)).collect();
    if let Some(&bad) = targets.iter().find(|&&t| t >= v) {
        return Err(TrainError::Config(format!("target id {bad} outside {v} logits")));
    }
    let picked = tape.gather(lp, &index, 0.0)?;
    let nll = tape.sum(picked);
    let mut sum = tape.scale(nll, -(1.0 - eps));
    if eps > 0.0 {
        let sel = if rows.start == 0 && rows.end == n {
            lp
        } else {
            let r: Vec<usize> = rows.clone().collect();
            tape.gather_rows(lp, &r)?
        };
        let all = tape.sum(sel);
        let smooth = tape.scale(all, -eps / v as f64);
        sum = tape.add(sum, smooth)?;
    }
    Ok(LossTerm {
        sum,
        tokens: targets.len(),
    })
}

fn check_aligned(tape: &Tape, logits: Var, gold: &[usize]) -> Result<(), TrainError> {
    let rows = tape.value(logits).rows();
    if gold.len() < 2 || rows + 1 != gold.len() {
        return Err(TrainError::LengthMismatch {
            logits: rows,
            gold: gold.len(),
        });
    }
    Ok(())
}

/// Term over every position after `<asr>`: row `i` of the teacher-forced
/// logits predicts `gold[i + 1]`.
pub fn tt_ce_term(tape: &mut Tape, logits: Var, gold: &[usize], eps: f64) -> Result<LossTerm, TrainError> {
    check_aligned(tape, logits, gold)?;
    ce_rows(tape, logits, 0..gold.len() - 1, &gold[1..], eps)
}

/// `L_TT`: cross-entropy of the consecutive sequence `gold = [<asr>, z, <st>, y, <eos>]`.
pub fn tt_ce_loss(tape: &mut Tape, logits: Var, gold: &[usize], opts: LossOptions) -> Result<Var, TrainError> {
    let term = tt_ce_term(tape, logits, gold, opts.label_smoothing)?;
    Ok(term.reduce(tape, opts.norm))
}

/// Term over the rows predicting `y` and `<eos>`. The first `z_len + 1`
/// rows, which predict the transcript and `<st>`, contribute nothing.
pub fn masked_pretrain_term(
    tape: &mut Tape,
    logits: Var,
    gold: &[usize],
    z_len: usize,
    eps: f64,
) -> Result<LossTerm, TrainError> {
    check_aligned(tape, logits, gold)?;
    let first = z_len + 1;
    if first >= gold.len() - 1 {
        return Err(TrainError::LengthMismatch {
            logits: tape.value(logits).rows(),
            gold: gold.len(),
        });
    }
    ce_rows(tape, logits, first..gold.len() - 1, &gold[first + 1..], eps)
}

/// `L_TT_PT`: the decoder loss with transcript positions masked out.
pub fn masked_pretrain_loss(
    tape: &mut Tape,
    logits: Var,
    gold: &[usize],
    z_len: usize,
    opts: LossOptions,
) -> Result<Var, TrainError> {
    let term = masked_pretrain_term(tape, logits, gold, z_len, opts.label_smoothing)?;
    Ok(term.reduce(tape, opts.norm))
}

/// CTC term of one sample, `None` when the phonemes cannot be aligned.
pub fn ctc_term(tape: &mut Tape, ctc_log_probs: Var, phonemes: &[usize]) -> Result<Option<LossTerm>, TrainError> {
    Ok(ctc_loss(tape, ctc_log_probs, phonemes)?.map(|sum| LossTerm {
        sum,
        tokens: phonemes.len().max(1),
    }))
}

#[derive(Clone, Copy, Debug)]
pub struct JointLoss {
    pub total: Var,
    /// `None` when the CTC target was infeasible and the term was skipped.
    pub l_as: Option<Var>,
    pub l_tt: Var,
}

/// Mixes two reduced losses as `alpha·L_AS + (1-alpha)·L_TT`; without an
/// `L_AS` the result is `L_TT`.
pub fn mix(tape: &mut Tape, l_as: Option<Var>, l_tt: Var, alpha: f64) -> Result<Var, TrainError> {
    match l_as {
        Some(a) if alpha > 0.0 => {
            let a = tape.scale(a, alpha);
            if alpha >= 1.0 {
                return Ok(a);
            }
            let t = tape.scale(l_tt, 1.0 - alpha);
            Ok(tape.add(a, t)?)
        }
        _ => Ok(l_tt),
    }
}

/// `L = alpha·L_AS + (1-alpha)·L_TT` for one sample.
pub fn joint_loss(
    tape: &mut Tape,
    ctc_log_probs: Var,
    phonemes: &[usize],
    logits: Var,
    gold: &[usize],
    alpha: f64,
    opts: LossOptions,
) -> Result<JointLoss, TrainError> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(TrainError::Config(format!("alpha must be in [0, 1], got {alpha}")));
    }
    let l_as = ctc_term(tape, ctc_log_probs, phonemes)?.map(|t| t.reduce(tape, opts.norm));
    let l_tt = tt_ce_loss(tape, logits, gold, opts)?;
    let total = mix(tape, l_as, l_tt, alpha)?;
    Ok(JointLoss { total, l_as, l_tt })
}
