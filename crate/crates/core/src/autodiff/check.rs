//! Central finite-difference verification of reverse-mode gradients.

use serde::Serialize;

use super::{Tape, Tensor, Var};
use crate::error::{Result, SapoError};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(tensor, element)` with the largest relative error.
    pub worst: Option<(usize, usize)>,
    pub checked: usize,
    pub tol: f64,
    pub passed: bool,
}

/// `|a - b| / max(1e-12, |a| + |b|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-12)
}

/// Compares `backward()` of `f` against `(f(θ+h·eᵢ) − f(θ−h·eᵢ)) / 2h` for every
/// element of every tensor in `params`.
///
/// `f` receives a fresh tape and one leaf per parameter tensor and must
/// return a scalar.
pub fn grad_check<F>(f: F, params: &[Tensor], step: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if !(step > 0.0) || !(tol > 0.0) {
        return Err(SapoError::Contract(format!(
            "grad_check needs step > 0 and tol > 0 (step={step}, tol={tol})"
        )));
    }

    let eval = |values: &[Tensor]| -> Result<(Tape, Vec<Var>, Var)> {
        let mut tape = Tape::new();
        let leaves: Vec<Var> = values.iter().map(|t| tape.leaf(t.clone())).collect();
        let out = f(&mut tape, &leaves)?;
        let v = tape.scalar(out);
        if !v.is_finite() {
            return Err(SapoError::Numeric(format!("objective is not finite ({v})")));
        }
        Ok((tape, leaves, out))
    };

    let (tape, leaves, out) = eval(params)?;
    let grads = tape.backward(out)?;
    let analytic: Vec<Vec<f64>> = leaves.iter().map(|&v| grads.wrt(v)).collect();

    let mut probe = params.to_vec();
    let mut max_rel = 0.0f64;
    let mut worst = None;
    let mut checked = 0;
    for (ti, tensor) in params.iter().enumerate() {
        for ei in 0..tensor.len() {
            let base = tensor.data()[ei];
            probe[ti].data[ei] = base + step;
            let (t_plus, _, o_plus) = eval(&probe)?;
            probe[ti].data[ei] = base - step;
            let (t_minus, _, o_minus) = eval(&probe)?;
            probe[ti].data[ei] = base;

            let numeric = (t_plus.scalar(o_plus) - t_minus.scalar(o_minus)) / (2.0 * step);
            let rel = relative_error(analytic[ti][ei], numeric);
            checked += 1;
            if rel > max_rel || worst.is_none() {
                max_rel = max_rel.max(rel);
                worst = Some((ti, ei));
            }
        }
    }
    Ok(GradCheckReport {
        max_rel_error: max_rel,
        worst,
        checked,
        tol,
        passed: max_rel < tol,
    })
}
