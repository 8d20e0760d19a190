//! Central-difference gradient checking.

use super::{Tape, Tensor, TensorError, Var};

/// Outcome of a gradient check.
#[derive(Clone, Debug)]
pub struct GradCheck {
    pub max_rel_error: f64,
    /// `(param, element)` of the worst entry.
    pub worst: (usize, usize),
    pub checked: usize,
}

/// Relative error floor: magnitudes below this are compared absolutely.
pub const MAGNITUDE_FLOOR: f64 = 1e-6;

fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(MAGNITUDE_FLOOR)
}

fn eval<F, E>(loss_fn: &mut F, params: &[Tensor], grads: bool) -> Result<(f64, Vec<Vec<f64>>), E>
where
    F: FnMut(&mut Tape, &[Var]) -> Result<Var, E>,
    E: From<TensorError>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
    let root = loss_fn(&mut tape, &vars)?;
    let value = tape.value(root).item();
    if !grads {
        return Ok((value, Vec::new()));
    }
    let g = tape.backward(root)?;
    let gs = vars
        .iter()
        .zip(params)
        .map(|(&v, p)| g.get_or_zeros(v, p.len()))
        .collect();
    Ok((value, gs))
}

/// Compares reverse-mode gradients of `loss_fn` with central differences
/// `(f(p+eps) − f(p−eps)) / 2eps` at every element of every parameter.
pub fn finite_diff_check<F, E>(loss_fn: F, params: &[Tensor], eps: f64) -> Result<GradCheck, E>
where
    F: FnMut(&mut Tape, &[Var]) -> Result<Var, E>,
    E: From<TensorError>,
{
    let coords: Vec<(usize, usize)> = params
        .iter()
        .enumerate()
        .flat_map(|(i, p)| (0..p.len()).map(move |j| (i, j)))
        .collect();
    finite_diff_check_at(loss_fn, params, eps, &coords)
}

/// As [`finite_diff_check`], restricted to the given `(param, element)` coordinates.
pub fn finite_diff_check_at<F, E>(
    mut loss_fn: F,
    params: &[Tensor],
    eps: f64,
    coords: &[(usize, usize)],
) -> Result<GradCheck, E>
where
    F: FnMut(&mut Tape, &[Var]) -> Result<Var, E>,
    E: From<TensorError>,
{
    if !(1e-6..=1e-2).contains(&eps) {
        return Err(TensorError::Invalid {
            op: "finite_diff_check",
            msg: format!("eps {eps} outside [1e-6, 1e-2]"),
        }
        .into());
    }
    let (base, analytic) = eval(&mut loss_fn, params, true)?;
    let (again, _) = eval(&mut loss_fn, params, false)?;
    if base.to_bits() != again.to_bits() {
        return Err(TensorError::NonDeterministic {
            first: base,
            second: again,
        }
        .into());
    }
    let mut work = params.to_vec();
    let mut report = GradCheck {
        max_rel_error: 0.0,
        worst: (0, 0),
        checked: 0,
    };
    for &(i, j) in coords {
        let orig = work[i].data()[j];
        work[i].data_mut()[j] = orig + eps;
        let (plus, _) = eval(&mut loss_fn, &work, false)?;
        work[i].data_mut()[j] = orig - eps;
        let (minus, _) = eval(&mut loss_fn, &work, false)?;
        work[i].data_mut()[j] = orig;
        let numeric = (plus - minus) / (2.0 * eps);
        let err = rel_err(analytic[i][j], numeric);
        if err > report.max_rel_error || err.is_nan() {
            report.max_rel_error = err;
            report.worst = (i, j);
        }
        report.checked += 1;
    }
    Ok(report)
}
