//! Acoustic-unit shrinking.
//!
//! Frames whose CTC argmax is blank are dropped and each maximal run of
//! consecutive frames sharing a non-blank argmax is replaced by the mean of
//! its encoder states. Run membership is decided on argmax labels and is not
//! differentiated; gradients flow through the averaging only, `1/run_len`
//! to every member frame.

use crate::ctc::argmax;
use crate::tensor::{Tape, Tensor, TensorError, Var};

/// Run label used for the single state kept when every frame is blank.
pub const FALLBACK_LABEL: usize = usize::MAX;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ShrinkPlan {
    pub run_labels: Vec<usize>,
    /// Inclusive `(start_frame, end_frame)` per run.
    pub run_spans: Vec<(usize, usize)>,
    /// All frames were blank; one fallback frame was kept.
    pub degenerate: bool,
}

impl ShrinkPlan {
    pub fn len(&self) -> usize {
        self.run_spans.len()
    }

    pub fn is_empty(&self) -> bool {
        self.run_spans.is_empty()
    }
}

#[derive(Clone, Debug)]
pub struct ShrinkOutput {
    /// Shrunk states, `L × d`.
    pub h_prime: Var,
    pub plan: ShrinkPlan,
}

/// Decides runs from `T × |V′|` posteriors (blank = last column).
pub fn plan(frame_log_probs: &Tensor) -> ShrinkPlan {
    let blank = frame_log_probs.cols() - 1;
    let mut run_labels = Vec::new();
    let mut run_spans: Vec<(usize, usize)> = Vec::new();
    for t in 0..frame_log_probs.rows() {
        let label = argmax(frame_log_probs.row(t));
        if label == blank {
            continue;
        }
        match (run_labels.last(), run_spans.last_mut()) {
            (Some(&prev), Some(span)) if prev == label && span.1 + 1 == t => span.1 = t,
            _ => {
                run_labels.push(label);
                run_spans.push((t, t));
            }
        }
    }
    if run_spans.is_empty() {
        // keep the frame with the least blank probability
        let keep = (0..frame_log_probs.rows())
            .min_by(|&a, &b| frame_log_probs.at(a, blank).total_cmp(&frame_log_probs.at(b, blank)))
            .unwrap_or(0);
        return ShrinkPlan {
            run_labels: vec![FALLBACK_LABEL],
            run_spans: vec![(keep, keep)],
            degenerate: true,
        };
    }
    ShrinkPlan {
        run_labels,
        run_spans,
        degenerate: false,
    }
}

/// Shrinks encoder states `h_hat` (`T × d`) using the CTC posteriors.
pub fn shrink(tape: &mut Tape, h_hat: Var, frame_log_probs: &Tensor) -> Result<ShrinkOutput, TensorError> {
    let frames = tape.value(h_hat).rows();
    if frames != frame_log_probs.rows() {
        return Err(TensorError::ShapeMismatch {
            op: "shrink",
            left: tape.value(h_hat).shape().to_vec(),
            right: frame_log_probs.shape().to_vec(),
        });
    }
    let plan = plan(frame_log_probs);
    let h_prime = tape.segment_mean(h_hat, &plan.run_spans)?;
    Ok(ShrinkOutput { h_prime, plan })
}

/// `|L − T_u|` between the shrunk length and the gold phoneme count.
pub fn shrink_length_error(run_labels: &[usize], gold_phonemes: &[usize]) -> usize {
    run_labels.len().abs_diff(gold_phonemes.len())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ctc::ctc_greedy_decode;
    use crate::tensor::finite_diff_check;
    use proptest::prelude::*;

    const BLANK: usize = 2;

    fn one_hot_log_probs(labels: &[usize]) -> Tensor {
        let rows: Vec<Vec<f64>> = labels
            .iter()
            .map(|&l| (0..3).map(|c| if c == l { 0.0 } else { -5.0 }).collect())
            .collect();
        Tensor::from_rows(&rows).unwrap()
    }

    fn states(n: usize, d: usize) -> Tensor {
        Tensor::matrix(n, d, (0..n * d).map(|i| i as f64 * 0.5 - 1.0).collect()).unwrap()
    }

    #[test]
    fn drops_blanks_and_averages_runs() {
        let lp = one_hot_log_probs(&[BLANK, 0, 0, BLANK, 1]);
        let h = states(5, 2);
        let mut t = Tape::new();
        let hv = t.constant(h.clone());
        let out = shrink(&mut t, hv, &lp).unwrap();
        assert_eq!(out.plan.run_labels, vec![0, 1]);
        assert_eq!(out.plan.run_spans, vec![(1, 2), (4, 4)]);
        let hp = t.value(out.h_prime);
        for c in 0..2 {
            assert_eq!(hp.at(0, c), (h.at(1, c) + h.at(2, c)) / 2.0);
            assert_eq!(hp.at(1, c), h.at(4, c));
        }
    }

    #[test]
    fn all_blank_falls_back_to_one_state() {
        let mut lp = one_hot_log_probs(&[BLANK, BLANK, BLANK]);
        lp.data_mut()[3 + BLANK] = -0.5; // frame 1 is the least blank
        let mut t = Tape::new();
        let hv = t.constant(states(3, 2));
        let out = shrink(&mut t, hv, &lp).unwrap();
        assert!(out.plan.degenerate);
        assert_eq!(out.plan.run_labels, vec![FALLBACK_LABEL]);
        assert_eq!(out.plan.run_spans, vec![(1, 1)]);
        assert_eq!(t.value(out.h_prime).rows(), 1);
    }

    #[test]
    fn no_blanks_no_repeats_is_identity() {
        let lp = one_hot_log_probs(&[0, 1, 0, 1]);
        let h = states(4, 3);
        let mut t = Tape::new();
        let hv = t.constant(h.clone());
        let out = shrink(&mut t, hv, &lp).unwrap();
        assert_eq!(t.value(out.h_prime), &h);
    }

    #[test]
    fn frame_count_mismatch() {
        let mut t = Tape::new();
        let hv = t.constant(states(3, 2));
        assert!(shrink(&mut t, hv, &one_hot_log_probs(&[0, 1])).is_err());
    }

    #[test]
    fn length_error() {
        assert_eq!(shrink_length_error(&[1; 5], &[2; 5]), 0);
        assert_eq!(shrink_length_error(&[1; 7], &[2; 5]), 2);
        assert_eq!(shrink_length_error(&[1; 3], &[2; 5]), 2);
    }

    #[test]
    fn gradient_is_one_over_run_length() {
        let lp = one_hot_log_probs(&[BLANK, 0, 0, 0, BLANK, 1, 1]);
        let mut t = Tape::new();
        let hv = t.param(states(7, 2));
        let out = shrink(&mut t, hv, &lp).unwrap();
        let s = t.sum(out.h_prime);
        let g = t.backward(s).unwrap();
        let want = [0.0, 1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0, 0.0, 0.5, 0.5];
        for (r, w) in want.iter().enumerate() {
            assert_eq!(g.get(hv).unwrap()[2 * r], *w);
        }
        let check = finite_diff_check(
            |t: &mut Tape, v: &[Var]| -> Result<Var, TensorError> {
                let o = shrink(t, v[0], &lp)?;
                Ok(t.sum(o.h_prime))
            },
            &[states(7, 2)],
            1e-5,
        )
        .unwrap();
        assert!(check.max_rel_error < 1e-6);
    }

    proptest! {
        #[test]
        fn length_matches_greedy_collapse(labels in proptest::collection::vec(0usize..3, 1..20)) {
            let lp = one_hot_log_probs(&labels);
            let p = plan(&lp);
            let (_, collapsed) = ctc_greedy_decode(&lp);
            if p.degenerate {
                prop_assert!(collapsed.is_empty());
            } else {
                prop_assert_eq!(p.len(), collapsed.len());
                prop_assert_eq!(&p.run_labels, &collapsed);
                let covered: usize = p.run_spans.iter().map(|(a, b)| b - a + 1).sum();
                prop_assert_eq!(covered, labels.iter().filter(|&&l| l != BLANK).count());
            }
        }

        #[test]
        fn commutes_with_feature_permutation(labels in proptest::collection::vec(0usize..3, 1..10), rot in 1usize..4) {
            let d = 4;
            let lp = one_hot_log_probs(&labels);
            let h = states(labels.len(), d);
            let perm = |t: &Tensor| {
                let rows: Vec<Vec<f64>> = t.to_rows().into_iter().map(|mut r| { r.rotate_left(rot); r }).collect();
                Tensor::from_rows(&rows).unwrap()
            };
            let mut tape = Tape::new();
            let a = tape.constant(h.clone());
            let b = tape.constant(perm(&h));
            let sa = shrink(&mut tape, a, &lp).unwrap();
            let sb = shrink(&mut tape, b, &lp).unwrap();
            prop_assert_eq!(&perm(tape.value(sa.h_prime)), tape.value(sb.h_prime));
        }
    }
}
