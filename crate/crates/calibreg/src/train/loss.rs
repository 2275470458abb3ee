//! Base training losses (batch means with analytic gradients).
//!
//! The mixture negative log-likelihood is evaluated with a log-sum-exp over
//! component log-densities; its gradients come from the usual responsibility
//! weights. The closed-form mixture CRPS uses the Gaussian kernel
//! A(m, s) = m (2 Phi(m/s) - 1) + 2 s phi(m/s), which is E|X - m| for
//! X ~ N(0, s^2); quantile-grid CRPS is the mean of the per-level quantile
//! scores, matching the grid distribution's own estimator.

use ndarray::Array2;

use crate::num::{norm_cdf, norm_pdf, LN_2PI};

use super::head::{MixtureCoeffs, QuantileCoeffs};

/// Batch-mean loss value plus gradients w.r.t. mixture parameters.
pub(super) struct MixtureLossGrad {
    pub(super) value: f64,
    pub(super) d_mu: Array2<f64>,
    pub(super) d_sigma: Array2<f64>,
    pub(super) d_w: Array2<f64>,
}

/// Mean negative log-likelihood of a mixture batch.
pub(super) fn nll_mixture(c: &MixtureCoeffs, y: &[f64]) -> MixtureLossGrad {
    let (n, k) = (c.n(), c.k());
    assert_eq!(n, y.len());
    let scale = 1.0 / n as f64;
    let mut value = 0.0;
    let mut d_mu = Array2::zeros((n, k));
    let mut d_sigma = Array2::zeros((n, k));
    let mut d_w = Array2::zeros((n, k));
    let mut log_terms = vec![0.0; k];
    for i in 0..n {
        let mut max = f64::NEG_INFINITY;
        for (j, term) in log_terms.iter_mut().enumerate() {
            let w = c.weights[[i, j]];
            let sig = c.sigma[[i, j]];
            let u = (y[i] - c.mu[[i, j]]) / sig;
            let log_norm = -0.5 * u * u - 0.5 * LN_2PI - sig.ln();
            *term = if w > 0.0 {
                w.ln() + log_norm
            } else {
                f64::NEG_INFINITY
            };
            max = max.max(*term);
        }
        let log_density = max + log_terms.iter().map(|t| (t - max).exp()).sum::<f64>().ln();
        value -= log_density;
        for j in 0..k {
            let sig = c.sigma[[i, j]];
            let u = (y[i] - c.mu[[i, j]]) / sig;
            let resp = (log_terms[j] - log_density).exp();
            d_mu[[i, j]] = -resp * u / sig * scale;
            d_sigma[[i, j]] = -resp * (u * u - 1.0) / sig * scale;
            // d/dw_k of -ln sum_j w_j N_j is -N_k / density.
            let log_norm = -0.5 * u * u - 0.5 * LN_2PI - sig.ln();
            d_w[[i, j]] = -(log_norm - log_density).exp() * scale;
        }
    }
    MixtureLossGrad {
        value: value * scale,
        d_mu,
        d_sigma,
        d_w,
    }
}

/// The CRPS kernel A(m, s) = E|X - m| for X ~ N(0, s^2), with partials.
fn crps_kernel(m: f64, s: f64) -> (f64, f64, f64) {
    let u = m / s;
    let (cdf, pdf) = (norm_cdf(u), norm_pdf(u));
    let a = m * (2.0 * cdf - 1.0) + 2.0 * s * pdf;
    (a, 2.0 * cdf - 1.0, 2.0 * pdf)
}

/// Mean closed-form CRPS of a mixture batch.
pub(super) fn crps_mixture(c: &MixtureCoeffs, y: &[f64]) -> MixtureLossGrad {
    let (n, k) = (c.n(), c.k());
    assert_eq!(n, y.len());
    let scale = 1.0 / n as f64;
    let mut value = 0.0;
    let mut d_mu = Array2::zeros((n, k));
    let mut d_sigma = Array2::zeros((n, k));
    let mut d_w = Array2::zeros((n, k));
    for i in 0..n {
        for j in 0..k {
            let w = c.weights[[i, j]];
            let sig = c.sigma[[i, j]];
            let (a, am, as_) = crps_kernel(y[i] - c.mu[[i, j]], sig);
            value += w * a * scale;
            d_w[[i, j]] += a * scale;
            d_mu[[i, j]] -= w * am * scale;
            d_sigma[[i, j]] += w * as_ * scale;
        }
        for j in 0..k {
            let wj = c.weights[[i, j]];
            for l in 0..k {
                let wl = c.weights[[i, l]];
                let sj = c.sigma[[i, j]];
                let sl = c.sigma[[i, l]];
                let s = (sj * sj + sl * sl).sqrt();
                let (a, am, as_) = crps_kernel(c.mu[[i, j]] - c.mu[[i, l]], s);
                value -= 0.5 * wj * wl * a * scale;
                d_w[[i, j]] -= wl * a * scale;
                // d/dmu_j over both symmetric occurrences of component j.
                d_mu[[i, j]] -= wj * wl * am * scale;
                d_sigma[[i, j]] -= wj * wl * (sj / s) * as_ * scale;
            }
        }
    }
    MixtureLossGrad {
        value,
        d_mu,
        d_sigma,
        d_w,
    }
}

/// Mean quantile-score CRPS of a quantile-grid batch:
/// (1/M) sum_j 2 (1{y <= q_j} - level_j)(q_j - y) per point.
pub(super) fn crps_grid(qc: &QuantileCoeffs, y: &[f64]) -> (f64, Array2<f64>) {
    let (n, m) = (qc.n(), qc.levels.len());
    assert_eq!(n, y.len());
    let scale = 1.0 / (n * m) as f64;
    let mut value = 0.0;
    let mut d_q = Array2::zeros((n, m));
    for i in 0..n {
        for j in 0..m {
            let q = qc.sorted[[i, j]];
            let ind = if y[i] <= q { 1.0 } else { 0.0 };
            let coeff = 2.0 * (ind - qc.levels[j]);
            value += coeff * (q - y[i]) * scale;
            d_q[[i, j]] = coeff * scale;
        }
    }
    (value, d_q)
}
