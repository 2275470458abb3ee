//! Statistical testing and multi-dataset comparison machinery.
//!
//! One half of this module decides whether a single model is probabilistically
//! calibrated: [`simulate_null_pce`] draws the finite-sample distribution of
//! the calibration error under exact calibration and [`p_value_upper`] turns
//! an observed error into a one-sided p-value, with [`holm_correct`] for
//! testing many models at once. The other half compares methods across many
//! datasets: Friedman and Wilcoxon tests, critical-difference ranking, effect
//! sizes, and letter-value summaries (see [`compare`]).

mod compare;

pub use compare::{
    cd_ranking, friedman_test, wilcoxon_signed_rank, CdRanking, ComparisonMatrix, MetricRecord,
    WilcoxonResult,
};

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::pce;
use crate::num::{pairwise_mean, quantile_type7};

/// Default number of null-distribution samples.
pub const DEFAULT_NULL_SIMS: usize = 10_000;

/// Sampling distribution of the calibration error under the null hypothesis
/// of exact probabilistic calibration (PITs i.i.d. uniform).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NullPceDistribution {
    /// PIT sample size each replication draws.
    pub n: usize,
    /// PCE grid size M.
    pub grid_size: usize,
    /// RNG seed the samples were generated from.
    pub seed: u64,
    /// Simulated PCE values, in generation order.
    pub samples: Vec<f64>,
}

/// Simulates `sims` draws of pce(n i.i.d. uniforms, M, 1), deterministically
/// in `seed`.
pub fn simulate_null_pce(
    n: usize,
    grid_size: usize,
    sims: usize,
    seed: u64,
) -> Result<NullPceDistribution> {
    if n == 0 || grid_size == 0 || sims == 0 {
        return Err(Error::invalid(
            "null simulation requires n, grid size, and sims >= 1",
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut samples = Vec::with_capacity(sims);
    let mut pits = vec![0.0f64; n];
    for _ in 0..sims {
        for z in pits.iter_mut() {
            *z = rng.random();
        }
        samples.push(pce(&pits, grid_size, 1.0)?);
    }
    Ok(NullPceDistribution {
        n,
        grid_size,
        seed,
        samples,
    })
}

impl NullPceDistribution {
    /// Upper-tail p-value of an observed calibration error; see
    /// [`p_value_upper`].
    pub fn p_value_upper(&self, observed: f64) -> f64 {
        p_value_upper(self, observed)
    }
}

/// One-sided upper-tail p-value: the fraction of null samples that are at
/// least as large as the observation. May be exactly 0 when the observation
/// exceeds every simulated value.
pub fn p_value_upper(null: &NullPceDistribution, observed: f64) -> f64 {
    let hits = null.samples.iter().filter(|s| **s >= observed).count();
    hits as f64 / null.samples.len() as f64
}

/// Holm step-down multiple-testing correction. Sorts the p-values ascending,
/// rejects while p_(i) <= alpha / (m - i + 1) (1-based i), and stops at the
/// first failure. Returns one rejection flag per input position.
pub fn holm_correct(p_values: &[f64], alpha: f64) -> Result<Vec<bool>> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::invalid("Holm alpha must lie strictly in (0, 1)"));
    }
    for &p in p_values {
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::invalid(format!("p-value {p} outside [0, 1]")));
        }
    }
    let m = p_values.len();
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| p_values[a].partial_cmp(&p_values[b]).unwrap().then(a.cmp(&b)));
    let mut flags = vec![false; m];
    for (i, &idx) in order.iter().enumerate() {
        if p_values[idx] <= alpha / (m - i) as f64 {
            flags[idx] = true;
        } else {
            break;
        }
    }
    Ok(flags)
}

/// Cohen's d standardized effect size: (mean(a) - mean(b)) / pooled_std with
/// Bessel-corrected variances pooled over both samples. Degenerate cases:
/// zero pooled spread yields 0 for equal means and a signed infinity
/// otherwise.
pub fn cohens_d(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::invalid("Cohen's d requires two samples of length >= 2"));
    }
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (ma, mb) = (pairwise_mean(a), pairwise_mean(b));
    let var = |xs: &[f64], m: f64| -> f64 {
        let sq: Vec<f64> = xs.iter().map(|x| (x - m) * (x - m)).collect();
        crate::num::pairwise_sum(&sq) / (xs.len() as f64 - 1.0)
    };
    let pooled = (((na - 1.0) * var(a, ma) + (nb - 1.0) * var(b, mb)) / (na + nb - 2.0)).sqrt();
    let diff = ma - mb;
    if pooled == 0.0 {
        return Ok(if diff == 0.0 {
            0.0
        } else {
            diff.signum() * f64::INFINITY
        });
    }
    Ok(diff / pooled)
}

/// Letter-value levels used by [`letter_values`].
pub const LETTER_LEVELS: [f64; 5] = [0.125, 0.25, 0.5, 0.75, 0.875];

/// Empirical quantiles at the letter-value levels {1/8, 1/4, 1/2, 3/4, 7/8},
/// with linear interpolation between order statistics at positions
/// (n - 1) q + 1. Returns (level, value) pairs in ascending level order.
pub fn letter_values(samples: &[f64]) -> Result<Vec<(f64, f64)>> {
    if samples.is_empty() {
        return Err(Error::invalid("letter values require a non-empty sample"));
    }
    let mut sorted = samples.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    Ok(LETTER_LEVELS
        .iter()
        .map(|&q| (q, quantile_type7(&sorted, q)))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn null_with_single_pit_and_single_grid_point_is_constant_half() {
        // One PIT, one grid point at 0.5: the empirical CDF there is 0 or 1,
        // so |0.5 - Fhat(0.5)| = 0.5 regardless of the draw.
        let null = simulate_null_pce(1, 1, 50, 11).unwrap();
        assert!(null.samples.iter().all(|&s| s == 0.5));
    }

    #[test]
    fn null_mean_shrinks_with_sample_size() {
        let small = simulate_null_pce(100, 100, 300, 5).unwrap();
        let large = simulate_null_pce(10_000, 100, 300, 5).unwrap();
        let mean = |xs: &[f64]| pairwise_mean(xs);
        assert!(mean(&large.samples) < mean(&small.samples));
    }

    #[test]
    fn null_simulation_is_deterministic() {
        let a = simulate_null_pce(50, 20, 200, 123).unwrap();
        let b = simulate_null_pce(50, 20, 200, 123).unwrap();
        assert_eq!(a.samples, b.samples);
        let c = simulate_null_pce(50, 20, 200, 124).unwrap();
        assert_ne!(a.samples, c.samples);
    }

    #[test]
    fn p_value_bounds_and_median() {
        let null = simulate_null_pce(200, 100, 1001, 7).unwrap();
        assert_eq!(p_value_upper(&null, -1.0), 1.0);
        let max = null.samples.iter().cloned().fold(f64::MIN, f64::max);
        assert_eq!(p_value_upper(&null, max + 1.0), 0.0);
        let mut sorted = null.samples.clone();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let median = sorted[500];
        let p = p_value_upper(&null, median);
        assert!((p - 0.5).abs() <= 1.0 / 1001.0 + 1e-12, "p = {p}");
    }

    #[test]
    fn holm_hand_examples() {
        assert_eq!(
            holm_correct(&[0.01, 0.04], 0.05).unwrap(),
            vec![true, true]
        );
        assert_eq!(
            holm_correct(&[0.03, 0.04], 0.05).unwrap(),
            vec![false, false]
        );
        assert_eq!(
            holm_correct(&[1.0, 1.0, 1.0], 0.05).unwrap(),
            vec![false, false, false]
        );
        // Step-down stops at the first failure even if later thresholds pass.
        assert_eq!(
            holm_correct(&[0.001, 0.5, 0.04], 0.05).unwrap(),
            vec![true, false, false]
        );
    }

    #[test]
    fn holm_is_a_subset_of_uncorrected_rejections() {
        let ps = [0.001, 0.02, 0.04, 0.2, 0.8];
        let flags = holm_correct(&ps, 0.05).unwrap();
        for (i, &f) in flags.iter().enumerate() {
            if f {
                assert!(ps[i] <= 0.05);
            }
        }
    }

    #[test]
    fn cohens_d_hand_cases() {
        let a = [1.0, 2.0, 3.0];
        assert_eq!(cohens_d(&a, &a).unwrap(), 0.0);
        // Means 1 vs 0, both sample variances 1, equal sizes -> d = 1.
        let hi = [0.0, 1.0, 2.0];
        let lo = [-1.0, 0.0, 1.0];
        assert!((cohens_d(&hi, &lo).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(
            cohens_d(&hi, &lo).unwrap(),
            -cohens_d(&lo, &hi).unwrap()
        );
        // Constant samples with different means -> signed infinity sentinel.
        assert_eq!(
            cohens_d(&[2.0, 2.0], &[1.0, 1.0]).unwrap(),
            f64::INFINITY
        );
        assert!(cohens_d(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn letter_values_hand_cases() {
        let nine: Vec<f64> = (1..=9).map(f64::from).collect();
        let lv = letter_values(&nine).unwrap();
        assert_eq!(lv[2], (0.5, 5.0));
        let constant = letter_values(&[3.3, 3.3, 3.3]).unwrap();
        assert!(constant.iter().all(|&(_, v)| v == 3.3));
        let pair = letter_values(&[0.0, 1.0]).unwrap();
        assert_eq!(pair[1], (0.25, 0.25));
        assert!(letter_values(&[]).is_err());
    }
}
