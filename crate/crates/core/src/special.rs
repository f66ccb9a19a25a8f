//! Scalar special functions used by the generalized activations.
//!
//! `erf`/`erfc` come from `libm` (FreeBSD msun rational approximations, under
//! one ulp). Everything built on top of them lives here.

/// `1 / sqrt(2π)`.
pub const FRAC_1_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// `ln(2π)`.
pub const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[inline]
pub fn erf(x: f64) -> f64 {
    libm::erf(x)
}

#[inline]
pub fn erfc(x: f64) -> f64 {
    libm::erfc(x)
}

/// Standard normal density φ(x).
#[inline]
pub fn normal_pdf(x: f64) -> f64 {
    FRAC_1_SQRT_2PI * (-0.5 * x * x).exp()
}

/// Standard normal CDF Φ(x), evaluated through `erfc` so the lower tail keeps
/// its relative accuracy.
#[inline]
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * erfc(-x * std::f64::consts::FRAC_1_SQRT_2)
}

/// Expected value of `max(X, 0)` for `X ~ N(w, 1)`:
///
/// `NR(w) = exp(-w²/2) / sqrt(2π) + (w/2)(1 + erf(w/√2)) = φ(w) + w Φ(w)`.
///
/// The second form is used since `1 + erf(w/√2)` cancels badly for negative `w`.
#[inline]
pub fn nr(w: f64) -> f64 {
    normal_pdf(w) + w * normal_cdf(w)
}

/// `dNR/dw = Φ(w)`.
#[inline]
pub fn nr_deriv(w: f64) -> f64 {
    normal_cdf(w)
}

/// Numerically stable `ln Σ exp(xs)`. Returns `-inf` for an empty slice or when
/// every entry is `-inf`.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    let sum: f64 = xs.iter().map(|&x| (x - max).exp()).sum();
    max + sum.ln()
}

/// Softmax with max-subtraction, written into `out`.
pub fn softmax_into(xs: &[f64], out: &mut [f64]) {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &x) in out.iter_mut().zip(xs) {
        *o = (x - max).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

pub fn softmax(xs: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; xs.len()];
    softmax_into(xs, &mut out);
    out
}
