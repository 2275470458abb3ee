//! Shared numeric primitives: stable sigmoid/softplus, standard-normal
//! functions, compensated summation, and the finite-sample rank index used by
//! split-conformal procedures.

use statrs::distribution::ContinuousCDF;

/// ln(2*pi), used by Gaussian log-densities.
pub const LN_2PI: f64 = 1.837_877_066_409_345_3;

/// Logistic sigmoid, stable in both tails.
#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Derivative of the logistic sigmoid: s(x) * (1 - s(x)).
#[inline]
pub fn sigmoid_deriv(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 - s)
}

/// Softplus ln(1 + e^x), stable for large |x|.
#[inline]
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Standard normal density.
#[inline]
pub fn norm_pdf(x: f64) -> f64 {
    (-0.5 * x * x - 0.5 * LN_2PI).exp()
}

/// Standard normal CDF via the complementary error function (relative
/// accuracy near machine precision in both tails).
#[inline]
pub fn norm_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / std::f64::consts::SQRT_2)
}

/// Standard normal survival function 1 - CDF, accurate in the upper tail.
#[inline]
pub fn norm_sf(x: f64) -> f64 {
    0.5 * libm::erfc(x / std::f64::consts::SQRT_2)
}

/// Standard normal quantile. A rational-approximation start is polished with
/// one Newton step on the CDF (survival form in the upper half so the
/// residual keeps full precision).
pub fn norm_quantile(p: f64) -> f64 {
    assert!(p > 0.0 && p < 1.0, "norm_quantile requires p in (0,1)");
    let n = statrs::distribution::Normal::new(0.0, 1.0).unwrap();
    let mut x = n.inverse_cdf(p);
    let pdf = norm_pdf(x);
    if pdf > 1e-300 {
        let resid = if p <= 0.5 {
            norm_cdf(x) - p
        } else {
            (1.0 - p) - norm_sf(x)
        };
        x -= resid / pdf;
    }
    x
}

/// Pairwise (cascade) summation: deterministic and far more accurate than a
/// naive left fold on long vectors.
pub fn pairwise_sum(xs: &[f64]) -> f64 {
    if xs.len() <= 32 {
        return xs.iter().sum();
    }
    let mid = xs.len() / 2;
    pairwise_sum(&xs[..mid]) + pairwise_sum(&xs[mid..])
}

/// Arithmetic mean with pairwise summation; 0 for an empty slice.
pub fn pairwise_mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        0.0
    } else {
        pairwise_sum(xs) / xs.len() as f64
    }
}

/// Linear-interpolation quantile of an ascending-sorted sample at the
/// position (n - 1) q + 1 (1-based), the common "type 7" convention.
pub fn quantile_type7(sorted: &[f64], q: f64) -> f64 {
    assert!(!sorted.is_empty(), "quantile of empty sample");
    assert!((0.0..=1.0).contains(&q));
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let pos = (n - 1) as f64 * q;
    let lo = pos.floor() as usize;
    let frac = pos - lo as f64;
    if lo + 1 >= n {
        sorted[n - 1]
    } else {
        sorted[lo] + frac * (sorted[lo + 1] - sorted[lo])
    }
}

/// 1-based order-statistic index ceil((n + 1) * alpha) used by finite-sample
/// calibration procedures, clamped to 1..=n+1. Index n+1 denotes the
/// +infinity sentinel order statistic.
///
/// A small downward guard on the product protects against `ceil` jumping a
/// whole rank when (n + 1) * alpha lands a few ulps above an integer.
pub fn ceil_rank_index(n: usize, alpha: f64) -> usize {
    let t = (n as f64 + 1.0) * alpha;
    let idx = (t - 1e-9).ceil();
    (idx.max(1.0) as usize).min(n + 1)
}
