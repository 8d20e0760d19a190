//! Transformer building blocks expressed as tape ops.

use super::{Tape, Tensor, TensorError, Var};

/// `x · w + b` with `b` broadcast over rows.
pub fn linear(tape: &mut Tape, x: Var, w: Var, b: Var) -> Result<Var, TensorError> {
    let y = tape.matmul(x, w)?;
    tape.add_row(y, b)
}

/// Projection weights of one multi-head attention layer. Matrices are
/// `d_model × d_model`, biases `1 × d_model`.
#[derive(Clone, Copy, Debug)]
pub struct AttentionWeights {
    pub wq: Var,
    pub bq: Var,
    pub wk: Var,
    pub bk: Var,
    pub wv: Var,
    pub bv: Var,
    pub wo: Var,
    pub bo: Var,
}

/// Scaled dot-product attention from `query` rows over `memory` rows, split
/// into `heads`, concatenated and output-projected.
///
/// `allowed` is a row-major `query_len × key_len` boolean matrix; `false`
/// entries receive exactly zero attention weight.
pub fn attention_block(
    tape: &mut Tape,
    w: &AttentionWeights,
    query: Var,
    memory: Var,
    allowed: Option<&[bool]>,
    heads: usize,
) -> Result<Var, TensorError> {
    let d = tape.value(query).cols();
    if heads == 0 || !d.is_multiple_of(heads) {
        return Err(TensorError::Invalid {
            op: "attention",
            msg: format!("model dimension {d} not divisible by {heads} heads"),
        });
    }
    let (q_len, k_len) = (tape.value(query).rows(), tape.value(memory).rows());
    if let Some(m) = allowed {
        if m.len() != q_len * k_len {
            return Err(TensorError::ShapeMismatch {
                op: "attention mask",
                left: vec![q_len, k_len],
                right: vec![m.len()],
            });
        }
    }
    let q = linear(tape, query, w.wq, w.bq)?;
    let k = linear(tape, memory, w.wk, w.bk)?;
    let v = linear(tape, memory, w.wv, w.bv)?;
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let (qh, kh, vh) = if heads == 1 {
            (q, k, v)
        } else {
            (
                tape.slice_cols(q, h * dh, dh)?,
                tape.slice_cols(k, h * dh, dh)?,
                tape.slice_cols(v, h * dh, dh)?,
            )
        };
        let scores = tape.matmul_ex(qh, kh, true)?;
        let scores = tape.scale(scores, scale);
        let p = tape.softmax(scores, allowed)?;
        outs.push(tape.matmul(p, vh)?);
    }
    let cat = if heads == 1 { outs[0] } else { tape.concat_cols(&outs)? };
    linear(tape, cat, w.wo, w.bo)
}

/// Lower-triangular `n × n` mask: position `i` may see `0..=i`.
pub fn causal_mask(n: usize) -> Vec<bool> {
    (0..n * n).map(|idx| idx % n <= idx / n).collect()
}

/// Fixed sinusoidal position table, `len × d`.
pub fn sinusoidal_positions(len: usize, d: usize) -> Tensor {
    let mut data = vec![0.0; len * d];
    for pos in 0..len {
        for i in 0..d {
            let pair = (i / 2) as f64;
            let angle = pos as f64 / 10_000f64.powf(2.0 * pair / d as f64);
            data[pos * d + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    Tensor::matrix(len, d, data).expect("positive dims")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn weights(tape: &mut Tape, d: usize, seed: f64) -> AttentionWeights {
        let mut mk = |rows: usize, salt: f64| {
            let data = (0..rows * d)
                .map(|i| ((i as f64 + 1.0) * (seed + salt)).sin() * 0.5)
                .collect();
            tape.param(Tensor::matrix(rows, d, data).unwrap())
        };
        AttentionWeights {
            wq: mk(d, 0.1),
            bq: mk(1, 0.2),
            wk: mk(d, 0.3),
            bk: mk(1, 0.4),
            wv: mk(d, 0.5),
            bv: mk(1, 0.6),
            wo: mk(d, 0.7),
            bo: mk(1, 0.8),
        }
    }

    #[test]
    fn single_position_returns_value_projection() {
        let mut t = Tape::new();
        let w = weights(&mut t, 4, 1.3);
        let x = t.constant(Tensor::matrix(1, 4, vec![0.2, -0.4, 0.9, 0.1]).unwrap());
        let out = attention_block(&mut t, &w, x, x, None, 1).unwrap();
        let v = linear(&mut t, x, w.wv, w.bv).unwrap();
        let want = linear(&mut t, v, w.wo, w.bo).unwrap();
        for (a, b) in t.value(out).data().iter().zip(t.value(want).data()) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn mask_restricts_to_one_key() {
        let mut t = Tape::new();
        let w = weights(&mut t, 4, 0.7);
        let q = t.constant(Tensor::matrix(1, 4, vec![0.5, 0.1, -0.3, 0.8]).unwrap());
        let mem_rows = vec![
            vec![1.0, 2.0, 3.0, 4.0],
            vec![-1.0, 0.5, 0.0, 2.0],
            vec![0.3, 0.3, -0.6, 1.1],
        ];
        let mem = t.constant(Tensor::from_rows(&mem_rows).unwrap());
        let out = attention_block(&mut t, &w, q, mem, Some(&[false, true, false]), 2).unwrap();
        let only = t.constant(Tensor::from_rows(&mem_rows[1..2]).unwrap());
        let want = attention_block(&mut t, &w, q, only, None, 2).unwrap();
        for (a, b) in t.value(out).data().iter().zip(t.value(want).data()) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn two_positions_match_direct_formula() {
        // identity projections, zero biases: output = softmax(q kᵀ / √d) v
        let d = 2;
        let mut t = Tape::new();
        let eye = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let zero = Tensor::zeros(&[1, d]);
        let w = AttentionWeights {
            wq: t.constant(eye.clone()),
            bq: t.constant(zero.clone()),
            wk: t.constant(eye.clone()),
            bk: t.constant(zero.clone()),
            wv: t.constant(eye.clone()),
            bv: t.constant(zero.clone()),
            wo: t.constant(eye),
            bo: t.constant(zero),
        };
        let rows = [[0.3, -1.0], [1.2, 0.4]];
        let x = t.constant(Tensor::from_rows(&[rows[0].to_vec(), rows[1].to_vec()]).unwrap());
        let out = attention_block(&mut t, &w, x, x, None, 1).unwrap();
        for i in 0..2 {
            let s: Vec<f64> = (0..2)
                .map(|j| (rows[i][0] * rows[j][0] + rows[i][1] * rows[j][1]) / (d as f64).sqrt())
                .collect();
            let z = s[0].exp() + s[1].exp();
            for c in 0..2 {
                let want = (s[0].exp() * rows[0][c] + s[1].exp() * rows[1][c]) / z;
                assert!((t.value(out).at(i, c) - want).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn heads_must_divide_dimension() {
        let mut t = Tape::new();
        let w = weights(&mut t, 4, 0.2);
        let x = t.constant(Tensor::zeros(&[2, 4]));
        assert!(attention_block(&mut t, &w, x, x, None, 3).is_err());
        assert!(attention_block(&mut t, &w, x, x, Some(&[true; 3]), 2).is_err());
    }

    #[test]
    fn causal_mask_is_lower_triangular() {
        assert_eq!(
            causal_mask(3),
            vec![true, false, false, true, true, false, true, true, true]
        );
    }
}
