//! Log-space numerics.

use num_traits::Float;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Log of probability zero.
pub const NEG_INF: f64 = f64::NEG_INFINITY;

/// `log(exp(a) + exp(b))` without overflow or underflow.
///
/// Negative infinity is the identity; NaN propagates.
#[inline]
pub fn log_sum_exp<F: Float>(a: F, b: F) -> F {
    if a.is_nan() || b.is_nan() {
        return F::nan();
    }
    let (hi, lo) = if a >= b { (a, b) } else { (b, a) };
    if lo == F::neg_infinity() {
        return hi;
    }
    hi + (lo - hi).exp().ln_1p()
}

/// Log-sum-exp over a slice, max-shifted. Empty or all `-inf` gives `-inf`.
pub fn log_sum_exp_slice<F: Float>(xs: &[F]) -> F {
    let max = xs.iter().copied().fold(F::neg_infinity(), F::max);
    if max == F::neg_infinity() {
        return max;
    }
    let sum = xs.iter().fold(F::zero(), |acc, &x| acc + (x - max).exp());
    max + sum.ln()
}

/// Log-softmax of one score row, computed in f64 and narrowed to `S`.
pub fn log_softmax<S: Scalar>(scores: &[S]) -> Result<Vec<S>> {
    let mut out = vec![S::zero(); scores.len()];
    log_softmax_into(scores, &mut out)?;
    Ok(out)
}

/// Writes `log_softmax(scores)` into `out` (same length).
pub fn log_softmax_into<S: Scalar>(scores: &[S], out: &mut [S]) -> Result<()> {
    if scores.len() != out.len() {
        return Err(Error::DimMismatch(format!(
            "log_softmax output length {} != input length {}",
            out.len(),
            scores.len()
        )));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::NonFinite("NaN score in log_softmax".into()));
    }
    let max = scores
        .iter()
        .map(|s| s.to_acc())
        .fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = scores.iter().map(|s| (s.to_acc() - max).exp()).sum();
    let log_z = max + sum.ln();
    for (o, s) in out.iter_mut().zip(scores) {
        *o = S::from_acc(s.to_acc() - log_z);
    }
    Ok(())
}

/// Softmax probabilities of one row of f64 scores.
pub fn softmax(scores: &[f64]) -> Vec<f64> {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut p: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let sum: f64 = p.iter().sum();
    p.iter_mut().for_each(|x| *x /= sum);
    p
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Nine significant digits.
pub fn fmt_sig(v: f64) -> String {
    if v == 0.0 || !v.is_finite() {
        return format!("{v}");
    }
    let exp = v.abs().log10().floor() as i32;
    if (-5..9).contains(&exp) {
        let digits = 8 - exp;
        let s = format!("{:.*}", digits as usize, v);
        if s.contains('.') {
            s.trim_end_matches('0').trim_end_matches('.').to_string()
        } else {
            s
        }
    } else {
        format!("{v:.8e}")
    }
}
