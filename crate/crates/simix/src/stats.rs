//! Small numeric helpers shared across the estimators.

pub(crate) const LN_2PI: f64 = 1.8378770664093453;

/// log phi(y | mean, var) for var > 0.
#[inline]
pub(crate) fn log_normal_pdf(y: f64, mean: f64, var: f64) -> f64 {
    let d = y - mean;
    -0.5 * (LN_2PI + var.ln() + d * d / var)
}

/// log(sum exp(v)) with max subtraction.
#[inline]
pub(crate) fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Normalize a slice of log-weights into probabilities in place.
#[inline]
pub(crate) fn softmax_in_place(logw: &mut [f64]) {
    let lse = log_sum_exp(logw);
    for w in logw.iter_mut() {
        *w = (*w - lse).exp();
    }
}
