//! Calibration regularizers: batch statistics of PIT values (or predicted
//! quantiles) that are small when the batch looks calibrated, with analytic
//! gradients for training.
//!
//! The sort-based penalties (`reg_qr`, `reg_pce_sort`) use the differentiable
//! order statistics from [`super::softsort`]; `tau_sort = inf` selects an
//! exact hard sort, which is the right choice for evaluating the statistics
//! outside of gradient descent.

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::num::{pairwise_mean, sigmoid_deriv};

use super::softsort::{order_stats, order_stats_backward, SortState};

/// Spacings below this floor are clamped and carry no gradient.
const SPACING_FLOOR: f64 = 1e-12;

fn check_unit_interval(pits: &[f64]) -> Result<()> {
    if pits.is_empty() {
        return Err(Error::invalid("PIT sample must be non-empty"));
    }
    if pits.iter().any(|z| !z.is_finite() || !(0.0..=1.0).contains(z)) {
        return Err(Error::invalid("PIT values must lie in [0, 1]"));
    }
    Ok(())
}

fn check_exponent(p: f64) -> Result<()> {
    if !p.is_finite() || p <= 0.0 {
        return Err(Error::invalid("exponent p must be finite and positive"));
    }
    Ok(())
}

/// |d|^p and its derivative in d, with a zero subgradient at d = 0.
fn abs_pow_grad(d: f64, p: f64) -> (f64, f64) {
    if d == 0.0 {
        return (0.0, 0.0);
    }
    let a = d.abs();
    if p == 1.0 {
        (a, d.signum())
    } else {
        (a.powf(p), p * a.powf(p - 1.0) * d.signum())
    }
}

fn qr_core(pits: &[f64], k: usize, tau_sort: f64) -> Result<(f64, SortState, Vec<f64>)> {
    check_unit_interval(pits)?;
    let n = pits.len();
    if k == 0 || k >= n {
        return Err(Error::invalid(format!(
            "spacing order k = {k} requires 1 <= k <= N - 1 (N = {n})"
        )));
    }
    let (values, state) = order_stats(pits, tau_sort);
    let count = n - k;
    let coeff = (n as f64 + 1.0) / k as f64;
    let mut value = 0.0;
    let mut g = vec![0.0; n];
    for i in 0..count {
        let spacing = values[i + k] - values[i];
        let floored = spacing.max(SPACING_FLOOR);
        value += (coeff * floored).ln() / count as f64;
        if spacing > SPACING_FLOOR {
            let d = 1.0 / (floored * count as f64);
            g[i + k] += d;
            g[i] -= d;
        }
    }
    Ok((value, state, g))
}

/// Spacing-based negative-entropy penalty: the mean of
/// ln[ ((N+1)/k) (Z_(i+k) - Z_(i)) ] over i = 1..N-k on sorted PIT values.
/// Zero for perfectly equispaced PITs (k = 1); large and negative spacings
/// are floored at 1e-12. Requires 1 <= k <= N - 1.
pub fn reg_qr(pits: &[f64], k: usize, tau_sort: f64) -> Result<f64> {
    qr_core(pits, k, tau_sort).map(|(v, _, _)| v)
}

/// [`reg_qr`] plus its gradient with respect to each (unsorted) PIT value.
pub(crate) fn reg_qr_grad(pits: &[f64], k: usize, tau_sort: f64) -> Result<(f64, Vec<f64>)> {
    let (value, state, g) = qr_core(pits, k, tau_sort)?;
    Ok((value, order_stats_backward(&state, &g)))
}

fn pce_sort_core(pits: &[f64], p: f64, tau_sort: f64) -> Result<(f64, SortState, Vec<f64>)> {
    check_unit_interval(pits)?;
    check_exponent(p)?;
    let n = pits.len();
    let (values, state) = order_stats(pits, tau_sort);
    let mut value = 0.0;
    let mut g = vec![0.0; n];
    for (i, &v) in values.iter().enumerate() {
        let target = (i + 1) as f64 / (n as f64 + 1.0);
        let (a, da) = abs_pow_grad(v - target, p);
        value += a / n as f64;
        g[i] = da / n as f64;
    }
    Ok((value, state, g))
}

/// Sorted-PIT calibration penalty: (1/N) sum_i |Z_(i) - i/(N+1)|^p, the
/// plug-in calibration error with the sample's own order statistics as the
/// empirical CDF evaluation points.
pub fn reg_pce_sort(pits: &[f64], p: f64, tau_sort: f64) -> Result<f64> {
    pce_sort_core(pits, p, tau_sort).map(|(v, _, _)| v)
}

/// [`reg_pce_sort`] plus its gradient with respect to each PIT value.
pub(crate) fn reg_pce_sort_grad(pits: &[f64], p: f64, tau_sort: f64) -> Result<(f64, Vec<f64>)> {
    let (value, state, g) = pce_sort_core(pits, p, tau_sort)?;
    Ok((value, order_stats_backward(&state, &g)))
}

fn pce_kde_core(pits: &[f64], levels: &[f64], tau: f64, p: f64) -> Result<(f64, Vec<f64>)> {
    check_unit_interval(pits)?;
    check_exponent(p)?;
    if levels.is_empty() {
        return Err(Error::invalid("KDE penalty requires at least one level"));
    }
    if tau.is_nan() || tau <= 0.0 {
        return Err(Error::invalid("KDE sharpness tau must be positive"));
    }
    let n = pits.len() as f64;
    let m = levels.len() as f64;
    let mut value = 0.0;
    let mut grad = vec![0.0; pits.len()];
    for &alpha in levels {
        let smooth: Vec<f64> = pits.iter().map(|&z| crate::num::sigmoid(tau * (alpha - z))).collect();
        let phi = pairwise_mean(&smooth);
        let (a, da) = abs_pow_grad(alpha - phi, p);
        value += a / m;
        if da != 0.0 {
            // d phi / d z_i = -tau sigma'(tau (alpha - z_i)) / N, and the
            // outer term differentiates through -phi.
            for (i, &z) in pits.iter().enumerate() {
                grad[i] += da / m * tau * sigmoid_deriv(tau * (alpha - z)) / n;
            }
        }
    }
    Ok((value, grad))
}

/// Smoothed calibration error: replaces the empirical CDF of the PIT sample
/// with a logistic-kernel estimate phi(alpha) = mean_i sigmoid(tau (alpha -
/// z_i)) and averages |alpha_j - phi(alpha_j)|^p over the given levels. As
/// tau grows this approaches the plug-in calibration error.
pub fn reg_pce_kde(pits: &[f64], levels: &[f64], tau: f64, p: f64) -> Result<f64> {
    pce_kde_core(pits, levels, tau, p).map(|(v, _)| v)
}

/// [`reg_pce_kde`] plus its gradient with respect to each PIT value.
pub(crate) fn reg_pce_kde_grad(
    pits: &[f64],
    levels: &[f64],
    tau: f64,
    p: f64,
) -> Result<(f64, Vec<f64>)> {
    pce_kde_core(pits, levels, tau, p)
}

fn trunc_core(
    quantiles: &Array2<f64>,
    targets: &[f64],
    levels: &[f64],
) -> Result<(f64, Array2<f64>)> {
    let (n, m) = (quantiles.nrows(), quantiles.ncols());
    if n == 0 || m == 0 {
        return Err(Error::invalid("truncation penalty requires a non-empty batch"));
    }
    if targets.len() != n {
        return Err(Error::invalid("quantile rows and targets must match"));
    }
    if levels.len() != m {
        return Err(Error::invalid("quantile columns and levels must match"));
    }
    let scale = 1.0 / (n * m) as f64;
    let mut value = 0.0;
    let mut grad = Array2::zeros((n, m));
    for j in 0..m {
        // Empirical batch coverage of the level-j quantile.
        let covered = (0..n).filter(|&i| targets[i] <= quantiles[[i, j]]).count();
        let under = (covered as f64 / n as f64) < levels[j];
        for i in 0..n {
            let q = quantiles[[i, j]];
            let y = targets[i];
            if under {
                // Batch under-covers: pull quantiles below their target up.
                if q < y {
                    value += (y - q) * scale;
                    grad[[i, j]] -= scale;
                }
            } else if y < q {
                // Batch over-covers (or exact): pull quantiles above down.
                value += (q - y) * scale;
                grad[[i, j]] += scale;
            }
        }
    }
    Ok((value, grad))
}

/// One-sided truncation penalty on predicted quantiles: for each level,
/// compares the batch coverage of that quantile with its nominal level and
/// penalizes the one-sided violations (targets above under-covering
/// quantiles, or quantiles above their targets when coverage is already
/// sufficient). The coverage comparison acts as a per-batch gate and carries
/// no gradient.
pub fn reg_trunc(quantiles: &Array2<f64>, targets: &[f64], levels: &[f64]) -> Result<f64> {
    trunc_core(quantiles, targets, levels).map(|(v, _)| v)
}

/// [`reg_trunc`] plus its gradient with respect to each predicted quantile.
pub(crate) fn reg_trunc_grad(
    quantiles: &Array2<f64>,
    targets: &[f64],
    levels: &[f64],
) -> Result<(f64, Array2<f64>)> {
    trunc_core(quantiles, targets, levels)
}
