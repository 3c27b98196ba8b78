//! Standard normal distribution helpers.
//!
//! The inverse CDF starts from Acklam's rational approximation (relative
//! error below 1.2e-9) and takes one Newton step against an accurate
//! complementary error function, which brings it to roughly machine
//! precision.

use std::f64::consts::{FRAC_1_SQRT_2, PI};

/// Probabilities are clamped to `[PROB_CLAMP, 1 - PROB_CLAMP]` before inversion.
pub const PROB_CLAMP: f64 = 1e-7;

const A: [f64; 6] = [
    -3.969683028665376e+01,
    2.209460984245205e+02,
    -2.759285104469687e+02,
    1.383577518672690e+02,
    -3.066479806614716e+01,
    2.506628277459239e+00,
];
const B: [f64; 5] = [
    -5.447609879822406e+01,
    1.615858368580409e+02,
    -1.556989798598866e+02,
    6.680131188771972e+01,
    -1.328068155288572e+01,
];
const C: [f64; 6] = [
    -7.784894002430293e-03,
    -3.223964580411365e-01,
    -2.400758277161838e+00,
    -2.549732539343734e+00,
    4.374664141464968e+00,
    2.938163982698783e+00,
];
const D: [f64; 4] = [
    7.784695709041462e-03,
    3.224671290700398e-01,
    2.445134137142996e+00,
    3.754408661907416e+00,
];
const P_LOW: f64 = 0.02425;

pub fn normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * PI).sqrt()
}

pub fn ln_normal_pdf(x: f64) -> f64 {
    -0.5 * x * x - 0.5 * (2.0 * PI).ln()
}

/// Standard normal CDF.
pub fn normal_cdf(x: f64) -> f64 {
    if x <= 0.0 {
        0.5 * libm::erfc(-x * FRAC_1_SQRT_2)
    } else {
        1.0 - 0.5 * libm::erfc(x * FRAC_1_SQRT_2)
    }
}

/// Initial rational approximation for `p` in `(0, 0.5]`.
fn acklam_lower(p: f64) -> f64 {
    if p < P_LOW {
        let q = (-2.0 * p.ln()).sqrt();
        (((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    } else {
        let q = p - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    }
}

fn icdf_lower(p: f64) -> f64 {
    let x = acklam_lower(p);
    // x <= 0 here, so the lower-tail form of the CDF keeps full relative accuracy.
    let err = 0.5 * libm::erfc(-x * FRAC_1_SQRT_2) - p;
    x - err / normal_pdf(x)
}

/// Inverse standard normal CDF for `p` in `(0, 1)`.
///
/// Returns `-inf`/`+inf` at the endpoints and NaN outside `[0, 1]`. The
/// result is exactly odd about `p = 0.5` whenever `1 - p` is representable.
pub fn inverse_normal_cdf(p: f64) -> f64 {
    if p.is_nan() || !(0.0..=1.0).contains(&p) {
        return f64::NAN;
    }
    if p == 0.0 {
        return f64::NEG_INFINITY;
    }
    if p == 1.0 {
        return f64::INFINITY;
    }
    if p > 0.5 {
        -icdf_lower(1.0 - p)
    } else {
        icdf_lower(p)
    }
}

/// Inverse CDF after clamping `u` into `[PROB_CLAMP, 1 - PROB_CLAMP]`.
pub fn clamped_icdf(u: f64) -> f64 {
    inverse_normal_cdf(u.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP))
}
