//! Independent numerical oracles for the acceptance and property suites.
//!
//! Everything in this module is computed from first principles — quadrature,
//! brute-force enumeration, closed-form tail sums, pairwise rank counting —
//! without calling the library's own implementations of the same quantities.
//! Agreement between the two is therefore meaningful evidence of correctness
//! rather than a tautology.

#![allow(dead_code)] // each integration-test binary uses its own subset

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Standard normal CDF via the complementary error function.
pub fn norm_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / std::f64::consts::SQRT_2)
}

/// CDF of a Gaussian mixture with the given weights, means, and stds.
pub fn mixture_cdf(w: &[f64], mu: &[f64], sd: &[f64], x: f64) -> f64 {
    w.iter()
        .zip(mu)
        .zip(sd)
        .map(|((&wi, &mi), &si)| wi * norm_cdf((x - mi) / si))
        .sum()
}

/// Simpson's rule on [a, b] with n subintervals (n is rounded up to even).
pub fn simpson(f: impl Fn(f64) -> f64, a: f64, b: f64, n: usize) -> f64 {
    let n = if n.is_multiple_of(2) { n } else { n + 1 };
    let h = (b - a) / n as f64;
    let mut acc = f(a) + f(b);
    for i in 1..n {
        let w = if i % 2 == 1 { 4.0 } else { 2.0 };
        acc += w * f(a + i as f64 * h);
    }
    acc * h / 3.0
}

/// Midpoint rule on [a, b] with n cells.
pub fn midpoint(f: impl Fn(f64) -> f64, a: f64, b: f64, n: usize) -> f64 {
    let h = (b - a) / n as f64;
    (0..n).map(|i| f(a + (i as f64 + 0.5) * h)).sum::<f64>() * h
}

/// CRPS of the predictive CDF `cdf` at observation `y` by split quadrature:
/// the integral of F(x)^2 below y plus the integral of (1 - F(x))^2 above y,
/// each by Simpson's rule with `n` subintervals over [lo, y] and [y, hi].
pub fn numeric_crps(cdf: impl Fn(f64) -> f64, y: f64, lo: f64, hi: f64, n: usize) -> f64 {
    let below = simpson(|x| cdf(x) * cdf(x), lo, y, n);
    let above = simpson(
        |x| {
            let t = 1.0 - cdf(x);
            t * t
        },
        y,
        hi,
        n,
    );
    below + above
}

/// A strictly increasing piecewise-linear CDF on [0, 1] with F(0) = 0 and
/// F(1) = 1, stored as matched knot abscissae `xs` and values `vs`.
pub struct PiecewiseCdf {
    pub xs: Vec<f64>,
    pub vs: Vec<f64>,
}

/// Strictly increasing knot positions built from gap-normalized draws: each
/// gap is at least `min_gap` of the total, so slopes stay bounded and the
/// function is strictly monotone.
fn random_knots(rng: &mut ChaCha8Rng, interior: usize, min_gap: f64) -> Vec<f64> {
    let gaps: Vec<f64> = (0..interior + 1)
        .map(|_| min_gap + rng.random::<f64>())
        .collect();
    let total: f64 = gaps.iter().sum();
    let mut knots = Vec::with_capacity(interior + 2);
    let mut acc = 0.0;
    knots.push(0.0);
    for g in &gaps[..interior] {
        acc += g / total;
        knots.push(acc);
    }
    knots.push(1.0);
    knots
}

impl PiecewiseCdf {
    /// Random strictly increasing piecewise-linear CDF with `interior`
    /// interior knots.
    pub fn random(rng: &mut ChaCha8Rng, interior: usize) -> Self {
        PiecewiseCdf {
            xs: random_knots(rng, interior, 0.05),
            vs: random_knots(rng, interior, 0.05),
        }
    }

    /// F(x) by linear interpolation (clamped outside [0, 1]).
    pub fn eval(&self, x: f64) -> f64 {
        if x <= 0.0 {
            return 0.0;
        }
        if x >= 1.0 {
            return 1.0;
        }
        let j = self.xs.partition_point(|&k| k <= x);
        let (x0, v0) = (self.xs[j - 1], self.vs[j - 1]);
        let (x1, v1) = (self.xs[j], self.vs[j]);
        v0 + (v1 - v0) * (x - x0) / (x1 - x0)
    }

    /// Exact inverse Q(u) (strict monotonicity makes it unique).
    pub fn inverse(&self, u: f64) -> f64 {
        if u <= 0.0 {
            return 0.0;
        }
        if u >= 1.0 {
            return 1.0;
        }
        let j = self.vs.partition_point(|&v| v <= u);
        let (x0, v0) = (self.xs[j - 1], self.vs[j - 1]);
        let (x1, v1) = (self.xs[j], self.vs[j]);
        x0 + (x1 - x0) * (u - v0) / (v1 - v0)
    }
}

/// Average ranks (1-based; ties share the mean of the positions they occupy)
/// computed by pairwise counting rather than sorting.
pub fn counting_ranks(values: &[f64]) -> Vec<f64> {
    values
        .iter()
        .map(|&v| {
            let smaller = values.iter().filter(|&&w| w < v).count() as f64;
            let equal = values.iter().filter(|&&w| w == v).count() as f64;
            smaller + (equal + 1.0) / 2.0
        })
        .collect()
}

/// Chi-square upper tail for even degrees of freedom, in closed form:
/// exp(-x/2) * sum_{j < df/2} (x/2)^j / j!.
pub fn chi_square_sf_even_df(x: f64, df: usize) -> f64 {
    assert!(df >= 2 && df.is_multiple_of(2), "closed form needs even df");
    let half = x / 2.0;
    let mut term = 1.0;
    let mut sum = 1.0;
    for j in 1..df / 2 {
        term *= half / j as f64;
        sum += term;
    }
    (-half).exp() * sum
}

/// Friedman rank test recomputed from scratch on a datasets-by-methods value
/// table: per-row average ranks by pairwise counting, the classic statistic
/// 12/(N k (k+1)) * sum_j R_j^2 - 3 N (k+1), and the even-df closed-form
/// chi-square tail for the p-value (so the method count must be odd).
pub fn friedman_reference(rows: &[Vec<f64>]) -> (f64, f64) {
    let n = rows.len() as f64;
    let k = rows[0].len();
    let mut rank_sums = vec![0.0; k];
    for row in rows {
        assert_eq!(row.len(), k, "ragged value table");
        for (j, r) in counting_ranks(row).into_iter().enumerate() {
            rank_sums[j] += r;
        }
    }
    let kf = k as f64;
    let sum_sq: f64 = rank_sums.iter().map(|r| r * r).sum();
    let stat = (12.0 / (n * kf * (kf + 1.0)) * sum_sq - 3.0 * n * (kf + 1.0)).max(0.0);
    (stat, chi_square_sf_even_df(stat, k - 1))
}

/// Exact two-sided Wilcoxon signed-rank test by brute-force enumeration of
/// all 2^n sign assignments: zero differences are dropped, |d| gets average
/// ranks, the statistic is min(W+, W-), and the p-value doubles the exact
/// lower-tail probability of the positive-rank sum (capped at 1).
pub fn wilcoxon_reference(a: &[f64], b: &[f64]) -> (f64, f64) {
    let diffs: Vec<f64> = a
        .iter()
        .zip(b)
        .map(|(&x, &y)| x - y)
        .filter(|d| *d != 0.0)
        .collect();
    let n = diffs.len();
    assert!((1..=20).contains(&n), "enumeration oracle needs 1 <= n <= 20");
    let abs: Vec<f64> = diffs.iter().map(|d| d.abs()).collect();
    let ranks = counting_ranks(&abs);
    let w_plus: f64 = diffs
        .iter()
        .zip(&ranks)
        .filter(|(d, _)| **d > 0.0)
        .map(|(_, r)| *r)
        .sum();
    let total = (n * (n + 1)) as f64 / 2.0;
    let w_obs = w_plus.min(total - w_plus);
    let mut at_or_below = 0u64;
    for mask in 0u64..(1u64 << n) {
        let w: f64 = (0..n).filter(|i| mask >> i & 1 == 1).map(|i| ranks[i]).sum();
        if w <= w_obs + 1e-9 {
            at_or_below += 1;
        }
    }
    let p = (2.0 * at_or_below as f64 / (1u64 << n) as f64).min(1.0);
    (w_obs, p)
}

/// Half-width of the normal-approximation binomial confidence interval for a
/// proportion: z * sqrt(p0 (1 - p0) / n).
pub fn binomial_ci_halfwidth(p0: f64, n: usize, z: f64) -> f64 {
    z * (p0 * (1.0 - p0) / n as f64).sqrt()
}

/// Two-sided 99% standard-normal critical value.
pub const Z_995: f64 = 2.5758293035489004;

/// Upper empirical quantile by order statistic: sorted ascending, take
/// element ceil(q * len) - 1.
pub fn upper_quantile(samples: &[f64], q: f64) -> f64 {
    let mut s = samples.to_vec();
    s.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let idx = ((s.len() as f64 * q).ceil() as usize).clamp(1, s.len());
    s[idx - 1]
}

/// Median by the same order-statistic convention (mean of the two central
/// order statistics for even lengths).
pub fn median(samples: &[f64]) -> f64 {
    let mut s = samples.to_vec();
    s.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = s.len();
    if n.is_multiple_of(2) {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    } else {
        s[n / 2]
    }
}

/// Standard normal draw by Box-Muller, keeping the oracle side free of the
/// library's samplers.
pub fn normal_draw(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.random::<f64>().max(f64::MIN_POSITIVE);
    let u2: f64 = rng.random();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Deterministic generator for the given stream id.
pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
