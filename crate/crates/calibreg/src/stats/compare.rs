//! Multi-dataset method comparison: rank-based omnibus and pairwise tests
//! plus critical-difference grouping.
//!
//! All tests treat metric values as losses: smaller is better and receives
//! the smaller rank. Ties get average ranks throughout.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::error::{Error, Result};
use crate::num::{norm_cdf, pairwise_mean};
use crate::stats::holm_correct;

/// One metric observation: a (dataset, method, seed) cell value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub dataset: String,
    pub method: String,
    pub seed: u64,
    pub value: f64,
}

/// Rectangular datasets-by-methods table of metric values. Cells hold the
/// mean over seeds; the per-seed values are retained for effect sizes.
/// Missing cells are rejected at construction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonMatrix {
    datasets: Vec<String>,
    methods: Vec<String>,
    /// cells[d][m] = (seed, value) pairs, ascending by seed.
    cells: Vec<Vec<Vec<(u64, f64)>>>,
    /// means[d][m] = mean over seeds of cells[d][m].
    means: Vec<Vec<f64>>,
}

impl ComparisonMatrix {
    /// Builds a matrix from explicit per-cell seed values. Rows follow
    /// `datasets`, columns follow `methods`; every cell needs at least one
    /// value, and values may be infinite (a degenerate method is simply
    /// worst-ranked) but not NaN.
    pub fn new(
        datasets: Vec<String>,
        methods: Vec<String>,
        cells: Vec<Vec<Vec<(u64, f64)>>>,
    ) -> Result<Self> {
        if datasets.is_empty() || methods.is_empty() {
            return Err(Error::invalid("comparison matrix must be non-empty"));
        }
        if cells.len() != datasets.len() || cells.iter().any(|r| r.len() != methods.len()) {
            return Err(Error::invalid("comparison matrix cells must be rectangular"));
        }
        let mut cells = cells;
        let mut means = Vec::with_capacity(datasets.len());
        for (d, row) in cells.iter_mut().enumerate() {
            let mut mean_row = Vec::with_capacity(methods.len());
            for (m, cell) in row.iter_mut().enumerate() {
                if cell.is_empty() {
                    return Err(Error::data(format!(
                        "missing cell: dataset {:?}, method {:?}",
                        datasets[d], methods[m]
                    )));
                }
                if cell.iter().any(|(_, v)| v.is_nan()) {
                    return Err(Error::data(format!(
                        "NaN value in dataset {:?}, method {:?}",
                        datasets[d], methods[m]
                    )));
                }
                cell.sort_by_key(|(seed, _)| *seed);
                let vals: Vec<f64> = cell.iter().map(|(_, v)| *v).collect();
                mean_row.push(pairwise_mean(&vals));
            }
            means.push(mean_row);
        }
        Ok(Self {
            datasets,
            methods,
            cells,
            means,
        })
    }

    /// Builds a matrix from a flat record list. Dataset and method labels are
    /// sorted lexicographically; every (dataset, method) pair must occur, and
    /// duplicate (dataset, method, seed) triples are rejected.
    pub fn from_records(records: &[MetricRecord]) -> Result<Self> {
        let mut grouped: BTreeMap<(String, String), BTreeMap<u64, f64>> = BTreeMap::new();
        for r in records {
            let slot = grouped
                .entry((r.dataset.clone(), r.method.clone()))
                .or_default();
            if slot.insert(r.seed, r.value).is_some() {
                return Err(Error::data(format!(
                    "duplicate record: dataset {:?}, method {:?}, seed {}",
                    r.dataset, r.method, r.seed
                )));
            }
        }
        let mut datasets: Vec<String> = grouped.keys().map(|(d, _)| d.clone()).collect();
        datasets.dedup();
        let mut methods: Vec<String> = grouped.keys().map(|(_, m)| m.clone()).collect();
        methods.sort();
        methods.dedup();
        if datasets.is_empty() {
            return Err(Error::invalid("no records to build a comparison matrix from"));
        }
        datasets.sort();
        let mut cells = Vec::with_capacity(datasets.len());
        for d in &datasets {
            let mut row = Vec::with_capacity(methods.len());
            for m in &methods {
                match grouped.get(&(d.clone(), m.clone())) {
                    Some(seeds) => row.push(seeds.iter().map(|(s, v)| (*s, *v)).collect()),
                    None => {
                        return Err(Error::data(format!(
                            "missing cell: dataset {d:?}, method {m:?}"
                        )))
                    }
                }
            }
            cells.push(row);
        }
        Self::new(datasets, methods, cells)
    }

    /// Ingests a long-format CSV with columns (dataset, method, seed, metric,
    /// value), keeping only rows whose metric equals `metric`. When a `model`
    /// column is present and non-empty, the method label becomes
    /// "model_method" so that different models do not collide. Rows with an
    /// empty value field are skipped (their absence surfaces as a
    /// missing-cell error if nothing else fills the cell).
    pub fn from_csv<R: Read>(reader: R, metric: &str) -> Result<Self> {
        let mut csv = csv::Reader::from_reader(reader);
        let headers = csv.headers()?.clone();
        let col = |name: &str| headers.iter().position(|h| h == name);
        let (d_col, m_col, s_col, met_col, v_col) = match (
            col("dataset"),
            col("method"),
            col("seed"),
            col("metric"),
            col("value"),
        ) {
            (Some(d), Some(m), Some(s), Some(mc), Some(v)) => (d, m, s, mc, v),
            _ => {
                return Err(Error::data(
                    "CSV must have dataset, method, seed, metric, value columns",
                ))
            }
        };
        let model_col = col("model");
        let mut records = Vec::new();
        for row in csv.records() {
            let row = row?;
            if row.get(met_col) != Some(metric) {
                continue;
            }
            let value_str = row.get(v_col).unwrap_or("");
            if value_str.is_empty() {
                continue;
            }
            let value: f64 = value_str
                .parse()
                .map_err(|_| Error::data(format!("unparsable value {value_str:?}")))?;
            let seed: u64 = row
                .get(s_col)
                .unwrap_or("")
                .parse()
                .map_err(|_| Error::data("unparsable seed"))?;
            let method = row.get(m_col).unwrap_or("").to_string();
            let method = match model_col.and_then(|c| row.get(c)) {
                Some(model) if !model.is_empty() => format!("{model}_{method}"),
                _ => method,
            };
            records.push(MetricRecord {
                dataset: row.get(d_col).unwrap_or("").to_string(),
                method,
                seed,
                value,
            });
        }
        if records.is_empty() {
            return Err(Error::data(format!("no CSV rows with metric {metric:?}")));
        }
        Self::from_records(&records)
    }

    /// Writes the matrix back out in the long CSV format accepted by
    /// [`ComparisonMatrix::from_csv`], labelling every row with `metric`.
    pub fn to_csv<W: Write>(&self, writer: W, metric: &str) -> Result<()> {
        let mut csv = csv::Writer::from_writer(writer);
        csv.write_record(["dataset", "method", "seed", "metric", "value"])?;
        for (d, dataset) in self.datasets.iter().enumerate() {
            for (m, method) in self.methods.iter().enumerate() {
                for &(seed, value) in &self.cells[d][m] {
                    csv.write_record([
                        dataset.as_str(),
                        method.as_str(),
                        &seed.to_string(),
                        metric,
                        &value.to_string(),
                    ])?;
                }
            }
        }
        csv.flush()?;
        Ok(())
    }

    pub fn datasets(&self) -> &[String] {
        &self.datasets
    }

    pub fn methods(&self) -> &[String] {
        &self.methods
    }

    /// Mean-over-seeds value of one cell.
    pub fn mean(&self, dataset: usize, method: usize) -> f64 {
        self.means[dataset][method]
    }

    /// Per-seed (seed, value) pairs of one cell, ascending by seed.
    pub fn cell(&self, dataset: usize, method: usize) -> &[(u64, f64)] {
        &self.cells[dataset][method]
    }

    /// Per-seed values of one cell, for effect-size computations.
    pub fn seed_values(&self, dataset: usize, method: usize) -> Vec<f64> {
        self.cells[dataset][method].iter().map(|(_, v)| *v).collect()
    }

    /// One method's mean values across all datasets (a column).
    pub fn column_means(&self, method: usize) -> Vec<f64> {
        self.means.iter().map(|row| row[method]).collect()
    }
}

/// Average ranks of `values`, smallest value getting rank 1; ties share the
/// average of the ranks they span.
pub(crate) fn average_ranks(values: &[f64]) -> Vec<f64> {
    let n = values.len();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| values[a].partial_cmp(&values[b]).unwrap().then(a.cmp(&b)));
    let mut ranks = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && values[idx[j + 1]] == values[idx[i]] {
            j += 1;
        }
        // 1-based positions i+1 ..= j+1 share their average rank.
        let avg = (i + j + 2) as f64 / 2.0;
        for k in i..=j {
            ranks[idx[k]] = avg;
        }
        i = j + 1;
    }
    ranks
}

/// Friedman rank test across datasets: ranks the methods within each dataset
/// (average ranks for ties), computes
/// chi2_F = 12 N / (k (k+1)) * [sum_j Rbar_j^2 - k (k+1)^2 / 4],
/// and refers it to a chi-square law with k - 1 degrees of freedom.
/// Returns (statistic, p_value).
pub fn friedman_test(matrix: &ComparisonMatrix) -> Result<(f64, f64)> {
    let k = matrix.methods.len();
    let n = matrix.datasets.len();
    if k < 2 || n < 2 {
        return Err(Error::invalid(
            "Friedman test needs at least 2 methods and 2 datasets",
        ));
    }
    let mut rank_sums = vec![0.0; k];
    for row in &matrix.means {
        for (j, r) in average_ranks(row).into_iter().enumerate() {
            rank_sums[j] += r;
        }
    }
    let kf = k as f64;
    let nf = n as f64;
    let mean_sq: f64 = rank_sums
        .iter()
        .map(|s| {
            let rbar = s / nf;
            rbar * rbar
        })
        .sum();
    let stat = (12.0 * nf / (kf * (kf + 1.0)) * (mean_sq - kf * (kf + 1.0) * (kf + 1.0) / 4.0))
        .max(0.0);
    let chi = ChiSquared::new((k - 1) as f64)
        .map_err(|e| Error::invalid(format!("chi-square degrees of freedom: {e}")))?;
    Ok((stat, chi.sf(stat)))
}

/// Outcome of the Wilcoxon signed-rank test.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WilcoxonResult {
    /// W = min(W+, W-) over the signed ranks of the non-zero differences.
    pub statistic: f64,
    /// Two-sided p-value: exact enumeration for up to 20 non-zero
    /// differences, normal approximation with tie correction above that.
    pub p_value: f64,
    /// True when every difference was zero; p = 1 by convention then.
    pub all_zero: bool,
}

/// Paired two-sided Wilcoxon signed-rank test on equal-length samples.
/// Zero differences are dropped; at least 5 non-zero differences are
/// required unless all of them are zero (which returns p = 1, flagged).
pub fn wilcoxon_signed_rank(a: &[f64], b: &[f64]) -> Result<WilcoxonResult> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::invalid(
            "Wilcoxon test requires equal-length non-empty samples",
        ));
    }
    let mut diffs: Vec<f64> = Vec::with_capacity(a.len());
    for (&x, &y) in a.iter().zip(b) {
        let d = x - y;
        if d.is_nan() {
            return Err(Error::invalid("non-comparable pair (NaN difference)"));
        }
        if d != 0.0 {
            diffs.push(d);
        }
    }
    if diffs.is_empty() {
        return Ok(WilcoxonResult {
            statistic: 0.0,
            p_value: 1.0,
            all_zero: true,
        });
    }
    let n = diffs.len();
    if n < 5 {
        return Err(Error::invalid(format!(
            "Wilcoxon test needs >= 5 non-zero differences, got {n}"
        )));
    }

    // Average ranks of |d| in doubled form so ties stay integral: the tied
    // group occupying 1-based positions lo+1 ..= hi+1 gets doubled rank
    // lo + hi + 2.
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&p, &q| {
        diffs[p]
            .abs()
            .partial_cmp(&diffs[q].abs())
            .unwrap()
            .then(p.cmp(&q))
    });
    let mut doubled = vec![0u64; n];
    let mut tie_sizes = Vec::new();
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && diffs[idx[j + 1]].abs() == diffs[idx[i]].abs() {
            j += 1;
        }
        for k in i..=j {
            doubled[idx[k]] = (i + j + 2) as u64;
        }
        tie_sizes.push((j - i + 1) as f64);
        i = j + 1;
    }
    let total: u64 = n as u64 * (n as u64 + 1);
    let w_plus: u64 = diffs
        .iter()
        .zip(&doubled)
        .filter(|(d, _)| **d > 0.0)
        .map(|(_, r)| *r)
        .sum();
    let w_minus = total - w_plus;
    let w_doubled = w_plus.min(w_minus);
    let statistic = w_doubled as f64 / 2.0;

    let p_value = if n <= 20 {
        // Exact null distribution of the doubled positive-rank sum over the
        // 2^n equiprobable sign assignments; two-sided by the symmetry of
        // the sum around total / 2.
        let mut counts = vec![0.0f64; total as usize + 1];
        counts[0] = 1.0;
        let mut reach = 0usize;
        for &r in &doubled {
            let r = r as usize;
            for s in (0..=reach).rev() {
                if counts[s] > 0.0 {
                    counts[s + r] += counts[s];
                }
            }
            reach += r;
        }
        let cum: f64 = counts[..=w_doubled as usize].iter().sum();
        (2.0 * cum / 2f64.powi(n as i32)).min(1.0)
    } else {
        let nf = n as f64;
        let mean = nf * (nf + 1.0) / 4.0;
        let tie_term: f64 = tie_sizes.iter().map(|t| (t * t * t - t) / 48.0).sum();
        let var = nf * (nf + 1.0) * (2.0 * nf + 1.0) / 24.0 - tie_term;
        if var <= 0.0 {
            1.0
        } else {
            let z = (statistic - mean) / var.sqrt();
            (2.0 * norm_cdf(-z.abs())).min(1.0)
        }
    };
    Ok(WilcoxonResult {
        statistic,
        p_value,
        all_zero: false,
    })
}

/// Critical-difference ranking output: average ranks per method (rank 1 =
/// best, i.e. smallest metric), the raw pairwise Wilcoxon p-value matrix,
/// and the maximal groups of methods whose pairwise differences were not
/// significant after a Holm correction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CdRanking {
    pub methods: Vec<String>,
    pub avg_ranks: Vec<f64>,
    /// Symmetric raw two-sided p-values; diagonal fixed at 1. Pairs whose
    /// test is undefined (fewer than 5 non-zero differences) count as 1.
    pub p_matrix: Vec<Vec<f64>>,
    /// Maximal cliques of the not-significantly-different graph, each
    /// listed in method order; the clique list is sorted deterministically.
    pub cliques: Vec<Vec<String>>,
}

/// Ranks methods across datasets and groups those not significantly
/// different: pairwise Wilcoxon tests on the per-dataset mean values,
/// Holm-corrected at `alpha`, followed by maximal-clique extraction on the
/// "not rejected" graph.
#[allow(clippy::needless_range_loop)] // triangular pairwise iteration
pub fn cd_ranking(matrix: &ComparisonMatrix, alpha: f64) -> Result<CdRanking> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::invalid("alpha must lie strictly in (0, 1)"));
    }
    let k = matrix.methods.len();
    let n = matrix.datasets.len() as f64;
    let mut rank_sums = vec![0.0; k];
    for row in &matrix.means {
        for (j, r) in average_ranks(row).into_iter().enumerate() {
            rank_sums[j] += r;
        }
    }
    let avg_ranks: Vec<f64> = rank_sums.iter().map(|s| s / n).collect();

    let mut p_matrix = vec![vec![1.0; k]; k];
    let mut pair_ps = Vec::with_capacity(k * (k - 1) / 2);
    for i in 0..k {
        for j in (i + 1)..k {
            let p = match wilcoxon_signed_rank(&matrix.column_means(i), &matrix.column_means(j)) {
                Ok(res) => res.p_value,
                // Too few informative datasets to test this pair: treat as
                // not significant rather than aborting the whole ranking.
                Err(_) => 1.0,
            };
            p_matrix[i][j] = p;
            p_matrix[j][i] = p;
            pair_ps.push(p);
        }
    }
    let flags = if pair_ps.is_empty() {
        Vec::new()
    } else {
        holm_correct(&pair_ps, alpha)?
    };
    let mut adjacent = vec![vec![false; k]; k];
    let mut t = 0;
    for i in 0..k {
        for j in (i + 1)..k {
            let keep = !flags[t];
            adjacent[i][j] = keep;
            adjacent[j][i] = keep;
            t += 1;
        }
    }
    let cliques = maximal_cliques(&adjacent)
        .into_iter()
        .map(|c| c.into_iter().map(|i| matrix.methods[i].clone()).collect())
        .collect();
    Ok(CdRanking {
        methods: matrix.methods.to_vec(),
        avg_ranks,
        p_matrix,
        cliques,
    })
}

/// Maximal cliques of an undirected graph (adjacency matrix, diagonal
/// ignored) by Bron–Kerbosch without pivoting; vertices are explored in
/// index order so the output is deterministic. Each clique comes out in
/// ascending vertex order and the clique list sorted lexicographically.
fn maximal_cliques(adjacent: &[Vec<bool>]) -> Vec<Vec<usize>> {
    fn expand(
        current: &mut Vec<usize>,
        mut candidates: Vec<usize>,
        mut excluded: Vec<usize>,
        adjacent: &[Vec<bool>],
        out: &mut Vec<Vec<usize>>,
    ) {
        if candidates.is_empty() && excluded.is_empty() {
            out.push(current.clone());
            return;
        }
        while let Some(&v) = candidates.first() {
            let next_candidates = candidates
                .iter()
                .copied()
                .filter(|&u| u != v && adjacent[v][u])
                .collect();
            let next_excluded = excluded
                .iter()
                .copied()
                .filter(|&u| adjacent[v][u])
                .collect();
            current.push(v);
            expand(current, next_candidates, next_excluded, adjacent, out);
            current.pop();
            candidates.retain(|&u| u != v);
            excluded.push(v);
        }
    }
    let n = adjacent.len();
    let mut out = Vec::new();
    expand(
        &mut Vec::new(),
        (0..n).collect(),
        Vec::new(),
        adjacent,
        &mut out,
    );
    out.sort();
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn matrix_from_means(datasets: usize, columns: &[Vec<f64>]) -> ComparisonMatrix {
        let names: Vec<String> = (0..datasets).map(|d| format!("data{d:02}")).collect();
        let methods: Vec<String> = (0..columns.len()).map(|m| format!("m{m}")).collect();
        let cells = (0..datasets)
            .map(|d| columns.iter().map(|col| vec![(0u64, col[d])]).collect())
            .collect();
        ComparisonMatrix::new(names, methods, cells).unwrap()
    }

    #[test]
    fn friedman_identical_columns_is_null() {
        let col = vec![1.0, 2.0, 3.0, 4.0];
        let m = matrix_from_means(4, &[col.clone(), col.clone(), col]);
        let (stat, p) = friedman_test(&m).unwrap();
        assert_eq!(stat, 0.0);
        assert_eq!(p, 1.0);
    }

    #[test]
    fn friedman_fixed_rank_order_hand_value() {
        // Method ranks are (1, 2, 3) on every one of the 4 datasets:
        // statistic 12*4/(3*4) * ((1-2)^2 + 0 + (3-2)^2) = 8, and the
        // chi-square(2) upper tail at 8 is exp(-4).
        let m = matrix_from_means(
            4,
            &[
                vec![1.0, 10.0, 5.0, 0.3],
                vec![2.0, 20.0, 6.0, 0.4],
                vec![3.0, 30.0, 7.0, 0.5],
            ],
        );
        let (stat, p) = friedman_test(&m).unwrap();
        assert!((stat - 8.0).abs() < 1e-12);
        assert!((p - (-4.0f64).exp()).abs() < 1e-12, "p = {p}");
    }

    #[test]
    fn friedman_invariant_to_row_permutation_and_monotone_row_transform() {
        let base = matrix_from_means(
            3,
            &[vec![1.0, 4.0, 2.0], vec![2.0, 5.0, 1.0], vec![3.0, 6.0, 3.0]],
        );
        let permuted = matrix_from_means(
            3,
            &[vec![2.0, 1.0, 4.0], vec![1.0, 2.0, 5.0], vec![3.0, 3.0, 6.0]],
        );
        assert_eq!(friedman_test(&base).unwrap(), friedman_test(&permuted).unwrap());

        // Cubing one dataset's row is strictly monotone, so ranks survive.
        let transformed = matrix_from_means(
            3,
            &[vec![1.0, 64.0, 2.0], vec![2.0, 125.0, 1.0], vec![3.0, 216.0, 3.0]],
        );
        assert_eq!(
            friedman_test(&base).unwrap(),
            friedman_test(&transformed).unwrap()
        );
    }

    #[test]
    fn friedman_rejects_degenerate_shapes() {
        let m = matrix_from_means(4, &[vec![1.0, 2.0, 3.0, 4.0]]);
        assert!(friedman_test(&m).is_err());
    }

    #[test]
    fn wilcoxon_constant_shift_hand_value() {
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let b: Vec<f64> = a.iter().map(|x| x + 0.5).collect();
        let res = wilcoxon_signed_rank(&a, &b).unwrap();
        assert_eq!(res.statistic, 0.0);
        assert!((res.p_value - 0.03125).abs() < 1e-15);
        assert!(!res.all_zero);
        // Swapping the arguments preserves both statistic and p-value.
        let swapped = wilcoxon_signed_rank(&b, &a).unwrap();
        assert_eq!(res.statistic, swapped.statistic);
        assert_eq!(res.p_value, swapped.p_value);
    }

    #[test]
    fn wilcoxon_symmetric_differences_give_p_one() {
        let a = [1.0, -1.0, 2.0, -2.0, 3.0, -3.0];
        let b = [0.0, 0.0, 0.0, 0.0, 0.0, 0.0];
        let res = wilcoxon_signed_rank(&a, &b).unwrap();
        assert_eq!(res.p_value, 1.0);
    }

    #[test]
    fn wilcoxon_zero_handling() {
        let a = [1.0, 2.0, 3.0];
        let res = wilcoxon_signed_rank(&a, &a).unwrap();
        assert!(res.all_zero);
        assert_eq!(res.p_value, 1.0);

        // Four non-zero differences are below the minimum.
        let b = [1.5, 2.5, 3.5, 4.5, 5.0];
        let c = [1.0, 2.0, 3.0, 4.0, 5.0];
        assert!(wilcoxon_signed_rank(&b, &c).is_err());
    }

    /// Brute-force two-sided p-value over all 2^n sign assignments, using
    /// f64 average ranks directly.
    fn brute_force_p(diffs: &[f64]) -> (f64, f64) {
        let n = diffs.len();
        let abs: Vec<f64> = diffs.iter().map(|d| d.abs()).collect();
        let ranks = average_ranks(&abs);
        let w_plus: f64 = diffs
            .iter()
            .zip(&ranks)
            .filter(|(d, _)| **d > 0.0)
            .map(|(_, r)| *r)
            .sum();
        let total: f64 = ranks.iter().sum();
        let w = w_plus.min(total - w_plus);
        let mut at_most = 0u64;
        for mask in 0u64..(1 << n) {
            let s: f64 = (0..n)
                .filter(|i| mask >> i & 1 == 1)
                .map(|i| ranks[i])
                .sum();
            if s <= w + 1e-9 {
                at_most += 1;
            }
        }
        (w, (2.0 * at_most as f64 / (1u64 << n) as f64).min(1.0))
    }

    #[test]
    fn wilcoxon_exact_matches_full_enumeration() {
        use rand::{RngExt, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(77);
        for n in [5usize, 8, 11] {
            for _ in 0..5 {
                // Half-integer values force frequent |d| ties.
                let a: Vec<f64> = (0..n)
                    .map(|_| (rng.random_range(-6..=6i32) as f64) / 2.0)
                    .collect();
                let b: Vec<f64> = (0..n)
                    .map(|_| (rng.random_range(-6..=6i32) as f64) / 2.0)
                    .collect();
                let diffs: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x - y).collect();
                if diffs.iter().filter(|d| **d != 0.0).count() < 5 {
                    continue;
                }
                let kept: Vec<f64> = diffs.iter().copied().filter(|d| *d != 0.0).collect();
                let (w_ref, p_ref) = brute_force_p(&kept);
                let res = wilcoxon_signed_rank(&a, &b).unwrap();
                assert!((res.statistic - w_ref).abs() < 1e-12);
                assert!(
                    (res.p_value - p_ref).abs() < 1e-12,
                    "n={n} p={} ref={p_ref}",
                    res.p_value
                );
            }
        }
    }

    #[test]
    fn wilcoxon_normal_approximation_for_large_samples() {
        use rand::{RngExt, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let a: Vec<f64> = (0..40).map(|_| rng.random::<f64>()).collect();
        let b: Vec<f64> = a.iter().map(|x| x + 0.3 * (rng.random::<f64>() - 0.3)).collect();
        let res = wilcoxon_signed_rank(&a, &b).unwrap();
        assert!(res.p_value > 0.0 && res.p_value <= 1.0);
        // A clear one-directional shift should be detected.
        let c: Vec<f64> = a.iter().map(|x| x + 1.0).collect();
        let shifted = wilcoxon_signed_rank(&a, &c).unwrap();
        assert_eq!(shifted.statistic, 0.0);
        assert!(shifted.p_value < 1e-6);
    }

    #[test]
    fn matrix_construction_validates_shape_and_cells() {
        let records = vec![
            MetricRecord { dataset: "d1".into(), method: "a".into(), seed: 0, value: 1.0 },
            MetricRecord { dataset: "d1".into(), method: "b".into(), seed: 0, value: 2.0 },
            MetricRecord { dataset: "d2".into(), method: "a".into(), seed: 0, value: 3.0 },
        ];
        let err = ComparisonMatrix::from_records(&records).unwrap_err();
        assert!(err.to_string().contains("missing cell"), "{err}");

        let mut dup = records.clone();
        dup.push(records[0].clone());
        assert!(ComparisonMatrix::from_records(&dup).is_err());

        let full = vec![
            MetricRecord { dataset: "d1".into(), method: "a".into(), seed: 1, value: 1.0 },
            MetricRecord { dataset: "d1".into(), method: "a".into(), seed: 0, value: 3.0 },
            MetricRecord { dataset: "d1".into(), method: "b".into(), seed: 0, value: 2.0 },
        ];
        let m = ComparisonMatrix::from_records(&full).unwrap();
        assert_eq!(m.mean(0, 0), 2.0);
        assert_eq!(m.cell(0, 0), &[(0, 3.0), (1, 1.0)]);
    }

    #[test]
    fn matrix_csv_roundtrip() {
        let records = vec![
            MetricRecord { dataset: "boston".into(), method: "rec_kde".into(), seed: 0, value: 0.25 },
            MetricRecord { dataset: "boston".into(), method: "none".into(), seed: 0, value: 0.5 },
            MetricRecord { dataset: "wine".into(), method: "rec_kde".into(), seed: 0, value: f64::INFINITY },
            MetricRecord { dataset: "wine".into(), method: "none".into(), seed: 0, value: 0.75 },
        ];
        let m = ComparisonMatrix::from_records(&records).unwrap();
        let mut buf = Vec::new();
        m.to_csv(&mut buf, "crps").unwrap();
        let back = ComparisonMatrix::from_csv(buf.as_slice(), "crps").unwrap();
        assert_eq!(m, back);
        // Filtering on a metric that never occurs is an error.
        assert!(ComparisonMatrix::from_csv(buf.as_slice(), "nll").is_err());
    }

    #[test]
    fn matrix_csv_combines_model_and_method_labels() {
        let csv = "dataset,model,method,seed,metric,value\n\
                   d1,mix_nll,none,0,pce,0.1\n\
                   d1,mix_nll,rec_kde,0,pce,0.2\n";
        let m = ComparisonMatrix::from_csv(csv.as_bytes(), "pce").unwrap();
        assert_eq!(m.methods(), ["mix_nll_none", "mix_nll_rec_kde"]);
    }

    #[test]
    fn cd_ranking_identical_columns_form_one_clique() {
        let col: Vec<f64> = (0..8).map(|i| i as f64).collect();
        let m = matrix_from_means(8, &[col.clone(), col.clone(), col]);
        let r = cd_ranking(&m, 0.05).unwrap();
        assert!(r.avg_ranks.iter().all(|&x| (x - 2.0).abs() < 1e-12));
        assert_eq!(r.cliques, vec![vec!["m0".to_string(), "m1".into(), "m2".into()]]);
    }

    #[test]
    fn cd_ranking_dominant_method_splits_cliques() {
        let n = 20;
        let worse: Vec<f64> = (0..n).map(|i| 1.0 + i as f64).collect();
        let better: Vec<f64> = worse.iter().map(|x| x - 0.5).collect();
        let m = matrix_from_means(n, &[better, worse]);
        let r = cd_ranking(&m, 0.05).unwrap();
        assert_eq!(r.avg_ranks, vec![1.0, 2.0]);
        assert_eq!(
            r.cliques,
            vec![vec!["m0".to_string()], vec!["m1".to_string()]]
        );
        assert!(r.p_matrix[0][1] < 0.05);
    }

    #[test]
    fn cd_ranking_invariant_to_column_order() {
        let c0: Vec<f64> = (0..10).map(|i| 0.1 * i as f64).collect();
        let c1: Vec<f64> = c0.iter().map(|x| x + 0.01).collect();
        let c2: Vec<f64> = c0.iter().map(|x| x + 5.0).collect();
        let m_a = matrix_from_means(10, &[c0.clone(), c1.clone(), c2.clone()]);
        let r_a = cd_ranking(&m_a, 0.05).unwrap();
        let m_b = matrix_from_means(10, &[c2, c0, c1]);
        let r_b = cd_ranking(&m_b, 0.05).unwrap();
        // Map clique method labels back to rank values for comparison.
        let label_ranks = |r: &CdRanking| -> Vec<Vec<i32>> {
            let mut sets: Vec<Vec<i32>> = r
                .cliques
                .iter()
                .map(|c| {
                    let mut v: Vec<i32> = c
                        .iter()
                        .map(|name| {
                            let i = r.methods.iter().position(|m| m == name).unwrap();
                            (r.avg_ranks[i] * 2.0) as i32
                        })
                        .collect();
                    v.sort();
                    v
                })
                .collect();
            sets.sort();
            sets
        };
        assert_eq!(label_ranks(&r_a), label_ranks(&r_b));
    }

    #[test]
    fn maximal_cliques_small_graphs() {
        // Path graph 0-1-2: cliques {0,1} and {1,2}.
        let mut adj = vec![vec![false; 3]; 3];
        adj[0][1] = true;
        adj[1][0] = true;
        adj[1][2] = true;
        adj[2][1] = true;
        assert_eq!(maximal_cliques(&adj), vec![vec![0, 1], vec![1, 2]]);
        // Empty graph: three singletons.
        let none = vec![vec![false; 3]; 3];
        assert_eq!(maximal_cliques(&none), vec![vec![0], vec![1], vec![2]]);
    }
}
