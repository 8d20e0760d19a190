//! Connectionist temporal classification.
//!
//! Frame posteriors are a `T × |V′|` matrix of log-probabilities whose last
//! column is the blank symbol. The loss is `−log Σ_{π ∈ B⁻¹(u)} Π_t p_t(π_t)`,
//! computed with the forward recursion over the blank-interleaved target
//! entirely in log space. The recursion is built from tape primitives, so
//! gradients come from the ordinary reverse sweep.

use thiserror::Error;

use crate::tensor::{kernels, Tape, Tensor, TensorError, Var};

/// Largest number of paths [`ctc_brute_force`] will enumerate.
pub const BRUTE_FORCE_LIMIT: u64 = 10_000_000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CtcError {
    #[error("target label {label} at position {pos} is not a non-blank label (blank = {blank})")]
    InvalidTarget { pos: usize, label: usize, blank: usize },
    #[error("brute force needs {required} paths, limit is {limit}")]
    GuardExceeded { required: u128, limit: u64 },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Removes consecutive repeats, then blanks. Repeats separated by a blank survive.
pub fn collapse(path: &[usize], blank: usize) -> Vec<usize> {
    let mut out = Vec::new();
    let mut prev = None;
    for &p in path {
        if Some(p) != prev && p != blank {
            out.push(p);
        }
        prev = Some(p);
    }
    out
}

/// Fewest frames that can emit `target`: one per label plus a blank between
/// each pair of equal neighbours.
pub fn required_frames(target: &[usize]) -> usize {
    target.len() + target.windows(2).filter(|w| w[0] == w[1]).count()
}

pub fn is_feasible(frames: usize, target: &[usize]) -> bool {
    frames >= required_frames(target)
}

fn check_target(target: &[usize], blank: usize) -> Result<(), CtcError> {
    match target.iter().position(|&l| l >= blank) {
        Some(pos) => Err(CtcError::InvalidTarget {
            pos,
            label: target[pos],
            blank,
        }),
        None => Ok(()),
    }
}

/// CTC negative log-likelihood of `target` under `log_probs` (`T × |V′|`).
///
/// Returns `Ok(None)` when the target cannot be emitted in `T` frames; that
/// is the infeasible sentinel, which callers count and skip.
pub fn ctc_loss(tape: &mut Tape, log_probs: Var, target: &[usize]) -> Result<Option<Var>, CtcError> {
    let lp = tape.value(log_probs);
    let (frames, classes) = (lp.rows(), lp.cols());
    let blank = classes - 1;
    check_target(target, blank)?;
    if !is_feasible(frames, target) {
        return Ok(None);
    }
    let mut ext = Vec::with_capacity(2 * target.len() + 1);
    ext.push(blank);
    for &l in target {
        ext.push(l);
        ext.push(blank);
    }
    let states = ext.len();
    let shift_one: Vec<Option<usize>> = (0..states).map(|s| s.checked_sub(1)).collect();
    let skip: Vec<Option<usize>> = (0..states)
        .map(|s| (s >= 2 && ext[s] != blank && ext[s] != ext[s - 2]).then(|| s - 2))
        .collect();
    let emit_index = |t: usize| -> Vec<Option<usize>> { ext.iter().map(|&l| Some(t * classes + l)).collect() };

    let first: Vec<Option<usize>> = (0..states).map(|s| (s < 2).then_some(ext[s])).collect();
    let mut alpha = tape.gather(log_probs, &first, f64::NEG_INFINITY)?;
    for t in 1..frames {
        let prev = tape.gather(alpha, &shift_one, f64::NEG_INFINITY)?;
        let skipped = tape.gather(alpha, &skip, f64::NEG_INFINITY)?;
        let merged = tape.log_add_exp(&[alpha, prev, skipped])?;
        let emit = tape.gather(log_probs, &emit_index(t), f64::NEG_INFINITY)?;
        alpha = tape.add(merged, emit)?;
    }
    let tails: Vec<Option<usize>> = if states >= 2 {
        vec![Some(states - 1), Some(states - 2)]
    } else {
        vec![Some(0)]
    };
    let ends = tape.gather(alpha, &tails, f64::NEG_INFINITY)?;
    let ends_t = tape.value(ends).clone();
    // log Σ over the (at most two) accepting states
    let log_p = if ends_t.len() == 2 {
        let a = tape.slice_cols(ends, 0, 1)?;
        let b = tape.slice_cols(ends, 1, 1)?;
        tape.log_add_exp(&[a, b])?
    } else {
        ends
    };
    let nll = tape.scale(log_p, -1.0);
    Ok(Some(tape.sum(nll)))
}

/// Scalar CTC loss; `f64::INFINITY` for infeasible targets.
pub fn ctc_loss_value(log_probs: &Tensor, target: &[usize]) -> Result<f64, CtcError> {
    let mut tape = Tape::new();
    let lp = tape.constant(log_probs.clone());
    Ok(match ctc_loss(&mut tape, lp, target)? {
        Some(v) => tape.value(v).item(),
        None => f64::INFINITY,
    })
}

/// Exact CTC loss by enumerating every path of length `T` over `V′`.
pub fn ctc_brute_force(log_probs: &Tensor, target: &[usize]) -> Result<f64, CtcError> {
    let (frames, classes) = (log_probs.rows(), log_probs.cols());
    let blank = classes - 1;
    check_target(target, blank)?;
    let required = (classes as u128).checked_pow(frames as u32).unwrap_or(u128::MAX);
    if required > u128::from(BRUTE_FORCE_LIMIT) {
        return Err(CtcError::GuardExceeded {
            required,
            limit: BRUTE_FORCE_LIMIT,
        });
    }
    let mut path = vec![0usize; frames];
    let mut matching = Vec::new();
    loop {
        if collapse(&path, blank) == target {
            matching.push(path.iter().enumerate().map(|(t, &c)| log_probs.at(t, c)).sum::<f64>());
        }
        // odometer increment
        let mut t = frames;
        loop {
            if t == 0 {
                let log_p = kernels::log_sum_exp(&matching);
                return Ok(-log_p);
            }
            t -= 1;
            path[t] += 1;
            if path[t] < classes {
                break;
            }
            path[t] = 0;
        }
    }
}

/// Per-frame argmax path (ties go to the lower id) and its collapse.
pub fn ctc_greedy_decode(log_probs: &Tensor) -> (Vec<usize>, Vec<usize>) {
    let blank = log_probs.cols() - 1;
    let path: Vec<usize> = (0..log_probs.rows()).map(|t| argmax(log_probs.row(t))).collect();
    let labels = collapse(&path, blank);
    (path, labels)
}

pub(crate) fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const A: usize = 0;
    const B: usize = 1;

    fn log_rows(rows: &[Vec<f64>]) -> Tensor {
        let logs: Vec<Vec<f64>> = rows.iter().map(|r| r.iter().map(|p| p.ln()).collect()).collect();
        Tensor::from_rows(&logs).unwrap()
    }

    fn random_posteriors(frames: usize, classes: usize, seed: u64) -> Tensor {
        let mut s = seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) | 1;
        let mut next = move || {
            s ^= s << 13;
            s ^= s >> 7;
            s ^= s << 17;
            (s >> 11) as f64 / (1u64 << 53) as f64
        };
        let logits: Vec<f64> = (0..frames * classes).map(|_| 4.0 * next() - 2.0).collect();
        Tensor::matrix(frames, classes, kernels::log_softmax_rows(&logits, classes)).unwrap()
    }

    #[test]
    fn collapse_examples() {
        let blank = 9;
        assert_eq!(collapse(&[blank, blank], blank), Vec::<usize>::new());
        assert_eq!(collapse(&[A, A, blank, A], blank), vec![A, A]);
        assert_eq!(collapse(&[A, B, B, blank], blank), vec![A, B]);
    }

    #[test]
    fn single_frame_single_label() {
        let lp = log_rows(&[vec![0.6, 0.1, 0.3]]);
        let l = ctc_loss_value(&lp, &[A]).unwrap();
        assert!((l + 0.6f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn two_frames_single_label() {
        let rows = vec![vec![0.5, 0.2, 0.3], vec![0.4, 0.1, 0.5]];
        let lp = log_rows(&rows);
        let p = rows[0][A] * rows[1][A] + rows[0][A] * rows[1][2] + rows[0][2] * rows[1][A];
        let l = ctc_loss_value(&lp, &[A]).unwrap();
        assert!((l + p.ln()).abs() < 1e-12);
        assert!((ctc_brute_force(&lp, &[A]).unwrap() + p.ln()).abs() < 1e-12);
    }

    #[test]
    fn repeated_label_needs_separator() {
        let lp = log_rows(&[vec![0.5, 0.2, 0.3]]);
        assert_eq!(ctc_loss_value(&lp, &[A, A]).unwrap(), f64::INFINITY);
        assert_eq!(ctc_brute_force(&lp, &[A, A]).unwrap(), f64::INFINITY);
        let mut tape = Tape::new();
        let v = tape.constant(lp);
        assert!(ctc_loss(&mut tape, v, &[A, A]).unwrap().is_none());
    }

    #[test]
    fn empty_target_is_all_blank_mass() {
        let rows = vec![vec![0.5, 0.2, 0.3], vec![0.4, 0.1, 0.5], vec![0.2, 0.2, 0.6]];
        let lp = log_rows(&rows);
        let p: f64 = rows.iter().map(|r| r[2]).product();
        assert!((ctc_loss_value(&lp, &[]).unwrap() + p.ln()).abs() < 1e-12);
        assert!((ctc_brute_force(&lp, &[]).unwrap() + p.ln()).abs() < 1e-12);
    }

    #[test]
    fn blank_in_target_is_rejected() {
        let lp = log_rows(&[vec![0.5, 0.5]]);
        assert!(matches!(
            ctc_loss_value(&lp, &[1]),
            Err(CtcError::InvalidTarget {
                pos: 0,
                label: 1,
                blank: 1
            })
        ));
    }

    #[test]
    fn brute_force_guard() {
        let lp = random_posteriors(12, 4, 1);
        assert!(matches!(
            ctc_brute_force(&lp, &[0]),
            Err(CtcError::GuardExceeded {
                required: 16_777_216,
                ..
            })
        ));
    }

    #[test]
    fn greedy_examples() {
        let blank = 2;
        let one_hot = |c: usize| {
            let mut r = vec![1e-6; 3];
            r[c] = 1.0;
            r
        };
        let lp = log_rows(&[one_hot(A), one_hot(blank), one_hot(B)]);
        assert_eq!(ctc_greedy_decode(&lp).1, vec![A, B]);
        let lp = log_rows(&[one_hot(blank), one_hot(blank)]);
        assert_eq!(ctc_greedy_decode(&lp).1, Vec::<usize>::new());
    }

    #[test]
    fn gradient_matches_finite_differences() {
        use crate::tensor::finite_diff_check;
        let logits = random_posteriors(5, 3, 7);
        let r = finite_diff_check(
            |t: &mut Tape, v: &[Var]| -> Result<Var, CtcError> {
                let lp = t.log_softmax(v[0]);
                Ok(ctc_loss(t, lp, &[A, B])?.expect("feasible"))
            },
            &[logits],
            1e-5,
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-3, "{r:?}");
    }

    proptest! {
        #[test]
        fn matches_brute_force(
            frames in 1usize..=5,
            classes in 2usize..=4,
            target_len in 0usize..=3,
            seed in any::<u64>(),
        ) {
            let lp = random_posteriors(frames, classes, seed);
            let target: Vec<usize> = (0..target_len).map(|i| (seed as usize >> (2 * i)) % (classes - 1)).collect();
            let dp = ctc_loss_value(&lp, &target).unwrap();
            let bf = ctc_brute_force(&lp, &target).unwrap();
            if bf.is_infinite() {
                prop_assert!(dp.is_infinite());
            } else {
                prop_assert!((dp - bf).abs() <= 1e-9, "dp {} bf {}", dp, bf);
                prop_assert!((-dp).exp() > 0.0 && (-dp).exp() <= 1.0 + 1e-12);
            }
        }

        #[test]
        fn feasibility_is_monotone(frames in 1usize..8, target in proptest::collection::vec(0usize..3, 0..5)) {
            if is_feasible(frames, &target) {
                prop_assert!(is_feasible(frames + 1, &target));
            }
        }

        #[test]
        fn collapse_is_idempotent(path in proptest::collection::vec(0usize..4, 0..12)) {
            let once = collapse(&path, 3);
            // a blank-free path with no merged runs collapses to itself only if
            // consecutive repeats are absent, which collapse guarantees unless a
            // blank separated them; re-embed with blanks between repeats.
            let mut embedded = Vec::new();
            for (i, &l) in once.iter().enumerate() {
                if i > 0 && once[i - 1] == l {
                    embedded.push(3);
                }
                embedded.push(l);
            }
            prop_assert_eq!(collapse(&embedded, 3), once);
        }
    }
}
