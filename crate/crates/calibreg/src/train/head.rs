//! Output heads: mappings from raw network outputs to predictive
//! distributions, with the gradient adapters training needs.
//!
//! The mixture head emits, per point, K means, K pre-scale values passed
//! through softplus (+ floor) to give positive scales, and K logits passed
//! through softmax to give normalized weights. The quantile head emits M raw
//! values that are sorted ascending (quantile-crossing repair) and read as
//! quantiles at fixed midpoint levels; gradients route back through the sort
//! permutation.

use ndarray::{s, Array2};
use serde::{Deserialize, Serialize};

use crate::dist::{GaussianMixture, QuantileGrid};
use crate::error::{Error, Result};
use crate::num::{norm_cdf, norm_pdf, norm_quantile, sigmoid, softplus};

/// Smallest admissible mixture scale; added after softplus.
pub const SIGMA_FLOOR: f64 = 1e-12;

/// Network output head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Head {
    /// Mixture of `k` Gaussians (3 k raw outputs).
    Mixture { k: usize },
    /// `m` quantiles at the midpoint levels (j - 1/2) / m.
    Quantile { m: usize },
}

impl Head {
    pub fn out_dim(&self) -> usize {
        match self {
            Head::Mixture { k } => 3 * k,
            Head::Quantile { m } => *m,
        }
    }

    pub(crate) fn validate(&self) -> Result<()> {
        match self {
            Head::Mixture { k } if *k >= 1 => Ok(()),
            Head::Mixture { .. } => Err(Error::invalid("mixture head requires K >= 1")),
            Head::Quantile { m } if *m >= 2 => Ok(()),
            Head::Quantile { .. } => Err(Error::invalid("quantile head requires M >= 2")),
        }
    }
}

/// Decoded mixture parameters for a batch; all arrays are n-by-k.
pub(crate) struct MixtureCoeffs {
    pub(crate) mu: Array2<f64>,
    pub(crate) sigma: Array2<f64>,
    pub(crate) weights: Array2<f64>,
    /// d sigma / d raw = sigmoid(raw), cached from the forward pass.
    sigma_slope: Array2<f64>,
}

/// Splits raw outputs [means | pre-scales | logits] into mixture parameters.
pub(crate) fn decode_mixture(raw: &Array2<f64>, k: usize) -> MixtureCoeffs {
    assert_eq!(raw.ncols(), 3 * k);
    let mu = raw.slice(s![.., 0..k]).to_owned();
    let pre = raw.slice(s![.., k..2 * k]);
    let sigma = pre.mapv(|v| softplus(v) + SIGMA_FLOOR);
    let sigma_slope = pre.mapv(sigmoid);
    let logits = raw.slice(s![.., 2 * k..3 * k]);
    let mut weights = Array2::zeros((raw.nrows(), k));
    for (i, row) in logits.outer_iter().enumerate() {
        let max = row.iter().cloned().fold(f64::MIN, f64::max);
        let mut sum = 0.0;
        for (j, &l) in row.iter().enumerate() {
            let e = (l - max).exp();
            weights[[i, j]] = e;
            sum += e;
        }
        for j in 0..k {
            weights[[i, j]] /= sum;
        }
    }
    MixtureCoeffs {
        mu,
        sigma,
        weights,
        sigma_slope,
    }
}

impl MixtureCoeffs {
    pub(crate) fn n(&self) -> usize {
        self.mu.nrows()
    }

    pub(crate) fn k(&self) -> usize {
        self.mu.ncols()
    }

    /// Predictive distribution of one point.
    pub(crate) fn dist(&self, i: usize) -> Result<GaussianMixture> {
        GaussianMixture::new(
            self.weights.row(i).to_vec(),
            self.mu.row(i).to_vec(),
            self.sigma.row(i).to_vec(),
        )
    }

    /// Chains per-parameter gradients (w.r.t. mu, sigma, weights) back to the
    /// raw outputs: identity for means, softplus slope for scales, and the
    /// softmax Jacobian for logits.
    pub(crate) fn raw_grad(
        &self,
        d_mu: &Array2<f64>,
        d_sigma: &Array2<f64>,
        d_w: &Array2<f64>,
    ) -> Array2<f64> {
        let (n, k) = (self.n(), self.k());
        let mut raw = Array2::zeros((n, 3 * k));
        for i in 0..n {
            let mut dot = 0.0;
            for j in 0..k {
                dot += self.weights[[i, j]] * d_w[[i, j]];
            }
            for j in 0..k {
                raw[[i, j]] = d_mu[[i, j]];
                raw[[i, k + j]] = d_sigma[[i, j]] * self.sigma_slope[[i, j]];
                raw[[i, 2 * k + j]] = self.weights[[i, j]] * (d_w[[i, j]] - dot);
            }
        }
        raw
    }

    /// PIT of one observation: z = sum_k w_k Phi((y - mu_k)/sigma_k), with
    /// its partial derivatives w.r.t. each mean, scale, and weight.
    pub(crate) fn pit_grad(&self, i: usize, y: f64) -> PitGrad {
        let k = self.k();
        let mut z = 0.0;
        let mut d_mu = vec![0.0; k];
        let mut d_sigma = vec![0.0; k];
        let mut d_w = vec![0.0; k];
        for j in 0..k {
            let w = self.weights[[i, j]];
            let sig = self.sigma[[i, j]];
            let u = (y - self.mu[[i, j]]) / sig;
            let phi = norm_pdf(u);
            z += w * norm_cdf(u);
            d_mu[j] = -w * phi / sig;
            d_sigma[j] = -w * phi * u / sig;
            d_w[j] = norm_cdf(u);
        }
        PitGrad {
            z: z.clamp(0.0, 1.0),
            d_mu,
            d_sigma,
            d_w,
        }
    }

    /// Quantile of one point at `alpha` with implicit-function gradients:
    /// from F(q; theta) = alpha, dq/dtheta = -(dF/dtheta at q) / pdf(q).
    /// Closed form for a single component; otherwise the precomputed mixture
    /// inverts its CDF.
    pub(crate) fn quantile_grad(
        &self,
        i: usize,
        alpha: f64,
        gm: &GaussianMixture,
    ) -> QuantileGradPoint {
        let k = self.k();
        let q = if k == 1 {
            self.mu[[i, 0]] + self.sigma[[i, 0]] * norm_quantile(alpha)
        } else {
            gm.quantile_fast(alpha)
        };
        let pdf = gm.pdf(q);
        let mut d_mu = vec![0.0; k];
        let mut d_sigma = vec![0.0; k];
        let mut d_w = vec![0.0; k];
        if pdf > 1e-300 {
            for j in 0..k {
                let w = self.weights[[i, j]];
                let sig = self.sigma[[i, j]];
                let u = (q - self.mu[[i, j]]) / sig;
                let phi = norm_pdf(u);
                d_mu[j] = w * phi / (sig * pdf);
                d_sigma[j] = w * phi * u / (sig * pdf);
                d_w[j] = -norm_cdf(u) / pdf;
            }
        }
        QuantileGradPoint {
            q,
            d_mu,
            d_sigma,
            d_w,
        }
    }
}

/// PIT value and partials of one point.
pub(crate) struct PitGrad {
    pub(crate) z: f64,
    pub(crate) d_mu: Vec<f64>,
    pub(crate) d_sigma: Vec<f64>,
    pub(crate) d_w: Vec<f64>,
}

/// Quantile value and partials of one point.
pub(crate) struct QuantileGradPoint {
    pub(crate) q: f64,
    pub(crate) d_mu: Vec<f64>,
    pub(crate) d_sigma: Vec<f64>,
    pub(crate) d_w: Vec<f64>,
}

/// Decoded quantile head for a batch: per-row ascending values plus the
/// permutation that produced them.
pub(crate) struct QuantileCoeffs {
    /// sorted[i] is the ascending rearrangement of raw row i.
    pub(crate) sorted: Array2<f64>,
    /// sorted[i][slot] = raw[i][perm[i][slot]].
    perm: Vec<Vec<usize>>,
    pub(crate) levels: Vec<f64>,
}

/// Sorts each row of raw outputs ascending (stable in the original column
/// index) so the row is a valid quantile vector for the fixed levels.
pub(crate) fn decode_quantile(raw: &Array2<f64>, levels: &[f64]) -> QuantileCoeffs {
    let (n, m) = (raw.nrows(), raw.ncols());
    assert_eq!(m, levels.len());
    let mut sorted = Array2::zeros((n, m));
    let mut perm = Vec::with_capacity(n);
    for i in 0..n {
        let row = raw.row(i);
        let mut idx: Vec<usize> = (0..m).collect();
        idx.sort_by(|&a, &b| row[a].partial_cmp(&row[b]).unwrap().then(a.cmp(&b)));
        for (slot, &j) in idx.iter().enumerate() {
            sorted[[i, slot]] = row[j];
        }
        perm.push(idx);
    }
    QuantileCoeffs {
        sorted,
        perm,
        levels: levels.to_vec(),
    }
}

impl QuantileCoeffs {
    pub(crate) fn n(&self) -> usize {
        self.sorted.nrows()
    }

    /// Predictive distribution of one point.
    pub(crate) fn dist(&self, i: usize) -> Result<QuantileGrid> {
        QuantileGrid::new(self.levels.clone(), self.sorted.row(i).to_vec())
    }

    /// Routes gradients w.r.t. the sorted values back to the raw outputs.
    pub(crate) fn raw_grad(&self, d_sorted: &Array2<f64>) -> Array2<f64> {
        let (n, m) = (self.n(), self.sorted.ncols());
        let mut raw = Array2::zeros((n, m));
        for i in 0..n {
            for slot in 0..m {
                raw[[i, self.perm[i][slot]]] += d_sorted[[i, slot]];
            }
        }
        raw
    }
}

/// PIT of a quantile grid w.r.t. its sorted values: the piecewise-linear CDF
/// value at `y` (mirroring the grid distribution, including the linear tail
/// extrapolation through the outermost knots) and its gradient with respect
/// to each sorted value. Flat regions (outside the support, degenerate
/// grids, duplicated knots) contribute zero gradient.
pub(crate) fn grid_pit(levels: &[f64], values: &[f64], y: f64) -> (f64, Vec<f64>) {
    let m = values.len();
    let mut grad = vec![0.0; m];
    let (v0, vm) = (values[0], values[m - 1]);
    if vm == v0 {
        return (if y >= v0 { 1.0 } else { 0.0 }, grad);
    }
    let span = levels[m - 1] - levels[0];
    let slope = (vm - v0) / span;
    let lo = v0 - slope * levels[0];
    let hi = vm + slope * (1.0 - levels[m - 1]);
    if y < lo {
        return (0.0, grad);
    }
    if y >= hi {
        return (1.0, grad);
    }
    if y < v0 {
        let z = levels[0] + (y - v0) / slope;
        // slope depends on the two outermost values: ds/dv0 = -1/span.
        grad[0] = -1.0 / slope + (y - v0) / (slope * slope * span);
        grad[m - 1] = -(y - v0) / (slope * slope * span);
        return (z, grad);
    }
    if y >= vm {
        let z = levels[m - 1] + (y - vm) / slope;
        grad[m - 1] = -1.0 / slope - (y - vm) / (slope * slope * span);
        grad[0] = (y - vm) / (slope * slope * span);
        return (z, grad);
    }
    // Interior: y lies in [values[j], values[j+1]) with distinct endpoints.
    let n_le = values.partition_point(|v| *v <= y);
    let (j0, j1) = (n_le - 1, n_le);
    let (a, b) = (values[j0], values[j1]);
    let (la, lb) = (levels[j0], levels[j1]);
    let dv = b - a;
    if dv == 0.0 {
        return (lb, grad);
    }
    let z = la + (lb - la) * (y - a) / dv;
    grad[j0] = (lb - la) * (y - b) / (dv * dv);
    grad[j1] = -(lb - la) * (y - a) / (dv * dv);
    (z, grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::calib::midpoint_levels;
    use ndarray::arr2;
    use rand::{RngExt, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_raw_outputs_give_uniform_weights_and_positive_scales() {
        let raw = Array2::zeros((2, 9));
        let c = decode_mixture(&raw, 3);
        for i in 0..2 {
            for j in 0..3 {
                assert!((c.weights[[i, j]] - 1.0 / 3.0).abs() < 1e-15);
                assert!(c.sigma[[i, j]] > 0.0);
                assert!((c.sigma[[i, j]] - 2f64.ln()).abs() < 1e-9);
            }
        }
        assert!(c.dist(0).is_ok());
    }

    #[test]
    fn quantile_rows_sort_and_gradients_follow_permutation() {
        let raw = arr2(&[[3.0, 1.0, 2.0]]);
        let levels = vec![0.25, 0.5, 0.75];
        let qc = decode_quantile(&raw, &levels);
        assert_eq!(qc.sorted.row(0).to_vec(), vec![1.0, 2.0, 3.0]);
        let d_sorted = arr2(&[[10.0, 20.0, 30.0]]);
        let d_raw = qc.raw_grad(&d_sorted);
        assert_eq!(d_raw.row(0).to_vec(), vec![30.0, 10.0, 20.0]);
    }

    #[test]
    fn mixture_pit_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let k = rng.random_range(1..4usize);
            let raw = Array2::from_shape_fn((1, 3 * k), |_| 2.0 * rng.random::<f64>() - 1.0);
            let y = 2.0 * rng.random::<f64>() - 1.0;
            let c = decode_mixture(&raw, k);
            let pg = c.pit_grad(0, y);
            let h = 1e-6;
            // Probe mu, sigma, and weight partials by nudging the decoded
            // parameters directly.
            for j in 0..k {
                let fd = |c_plus: &MixtureCoeffs, c_minus: &MixtureCoeffs| {
                    (c_plus.pit_grad(0, y).z - c_minus.pit_grad(0, y).z) / (2.0 * h)
                };
                let mut plus = clone_coeffs(&c);
                plus.mu[[0, j]] += h;
                let mut minus = clone_coeffs(&c);
                minus.mu[[0, j]] -= h;
                assert!((fd(&plus, &minus) - pg.d_mu[j]).abs() < 1e-6);

                let mut plus = clone_coeffs(&c);
                plus.sigma[[0, j]] += h;
                let mut minus = clone_coeffs(&c);
                minus.sigma[[0, j]] -= h;
                assert!((fd(&plus, &minus) - pg.d_sigma[j]).abs() < 1e-6);

                let mut plus = clone_coeffs(&c);
                plus.weights[[0, j]] += h;
                let mut minus = clone_coeffs(&c);
                minus.weights[[0, j]] -= h;
                assert!((fd(&plus, &minus) - pg.d_w[j]).abs() < 1e-6);
            }
        }
    }

    fn clone_coeffs(c: &MixtureCoeffs) -> MixtureCoeffs {
        MixtureCoeffs {
            mu: c.mu.clone(),
            sigma: c.sigma.clone(),
            weights: c.weights.clone(),
            sigma_slope: c.sigma_slope.clone(),
        }
    }

    #[test]
    fn mixture_quantile_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for trial in 0..20 {
            let k = rng.random_range(1..4usize);
            let raw = Array2::from_shape_fn((1, 3 * k), |_| rng.random::<f64>() - 0.5);
            let c = decode_mixture(&raw, k);
            let gm = c.dist(0).unwrap();
            let alpha = 0.05 + 0.9 * rng.random::<f64>();
            let qg = c.quantile_grad(0, alpha, &gm);
            assert!((gm.cdf(qg.q) - alpha).abs() < 1e-9);
            // The finite-difference reference re-inverts the CDF numerically
            // (solved to |F - alpha| <= 1e-12), so the step must be large
            // enough to dominate that solver noise.
            let h = 1e-4;
            for j in 0..k {
                let requantile = |c2: &MixtureCoeffs| -> f64 {
                    let gm2 = c2.dist(0).unwrap();
                    gm2.quantile_fast(alpha)
                };
                let mut plus = clone_coeffs(&c);
                plus.mu[[0, j]] += h;
                let mut minus = clone_coeffs(&c);
                minus.mu[[0, j]] -= h;
                let fd = (requantile(&plus) - requantile(&minus)) / (2.0 * h);
                assert!(
                    (fd - qg.d_mu[j]).abs() < 1e-5 + 1e-4 * fd.abs(),
                    "trial {trial} mu_{j}: fd {fd} vs {}",
                    qg.d_mu[j]
                );

                let mut plus = clone_coeffs(&c);
                plus.sigma[[0, j]] += h;
                let mut minus = clone_coeffs(&c);
                minus.sigma[[0, j]] -= h;
                let fd = (requantile(&plus) - requantile(&minus)) / (2.0 * h);
                assert!((fd - qg.d_sigma[j]).abs() < 1e-5 + 1e-4 * fd.abs());
            }
        }
    }

    #[test]
    fn grid_pit_matches_distribution_cdf_and_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let levels = midpoint_levels(8);
        for _ in 0..30 {
            let mut values: Vec<f64> = (0..8).map(|_| 4.0 * rng.random::<f64>() - 2.0).collect();
            values.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let gap = values.windows(2).fold(f64::MAX, |g, w| g.min(w[1] - w[0]));
            if gap < 1e-3 {
                continue;
            }
            let grid = QuantileGrid::new(levels.clone(), values.clone()).unwrap();
            let slope = (values[7] - values[0]) / (levels[7] - levels[0]);
            let lo = values[0] - slope * levels[0];
            let hi = values[7] + slope * (1.0 - levels[7]);
            for _ in 0..10 {
                let y = 6.0 * rng.random::<f64>() - 3.0;
                let (z, grad) = grid_pit(&levels, &values, y);
                assert!(
                    (z - grid.cdf(y)).abs() < 1e-12,
                    "pit {z} vs cdf {} at y={y}",
                    grid.cdf(y)
                );
                // Finite differences cross a kink when y sits almost exactly
                // on a knot or support edge; skip those probes.
                let near_kink = values
                    .iter()
                    .chain([lo, hi].iter())
                    .any(|v| (y - v).abs() < 1e-3);
                if near_kink {
                    continue;
                }
                let h = 1e-6;
                for j in 0..values.len() {
                    let mut plus = values.clone();
                    plus[j] += h;
                    let mut minus = values.clone();
                    minus[j] -= h;
                    let fd = (grid_pit(&levels, &plus, y).0 - grid_pit(&levels, &minus, y).0)
                        / (2.0 * h);
                    assert!(
                        (fd - grad[j]).abs() < 1e-5,
                        "y={y} knot {j}: fd {fd} vs {}",
                        grad[j]
                    );
                }
            }
        }
    }
}
