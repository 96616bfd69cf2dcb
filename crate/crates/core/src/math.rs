//! Numerically stable scalar helpers shared by the autodiff primitives and losses.

use std::f64::consts::LN_2;

/// `ln(1 + e^x)` without overflow for large `x` or precision loss for very negative `x`.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// `ln σ(x) = -softplus(-x)`.
pub fn log_sigmoid(x: f64) -> f64 {
    -softplus(-x)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 - e^x)` for `x < 0`, switching branches at `-ln 2`.
///
/// Returns NaN for `x >= 0`; callers that need an error check the domain first.
pub fn log1mexp(x: f64) -> f64 {
    if x >= 0.0 {
        f64::NAN
    } else if x > -LN_2 {
        (-x.exp_m1()).ln()
    } else {
        (-x.exp()).ln_1p()
    }
}

/// Derivative of [`log1mexp`]: `-e^x / (1 - e^x) = -1 / expm1(-x)`.
pub fn log1mexp_grad(x: f64) -> f64 {
    -1.0 / (-x).exp_m1()
}

/// Log-sum-exp of a slice; `-inf` for an empty slice.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + xs.iter().map(|&x| (x - max).exp()).sum::<f64>().ln()
}

/// In-place log-softmax of one row.
pub fn log_softmax_in_place(row: &mut [f64]) {
    let lse = log_sum_exp(row);
    for x in row.iter_mut() {
        *x -= lse;
    }
}
