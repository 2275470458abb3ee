//! Probabilistic-calibration and accuracy metrics plus reliability-diagram
//! data.
//!
//! The headline calibration metric treats the probability integral transform
//! (PIT) values `Z_i = F_i(y_i)` of a calibrated model as uniform: their
//! empirical CDF should track the diagonal. [`pce`] measures the deviation on
//! an equidistant interior grid, [`reliability_curve`] exposes the curve
//! itself, and [`consistency_band`] simulates the finite-sample envelope a
//! genuinely uniform sample would produce. [`evaluate`] bundles calibration
//! and accuracy metrics into a serializable [`EvaluationReport`].

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution as _};
use serde::{Deserialize, Serialize};

use crate::calib::{midpoint_levels, CalibrationMap, RecalibratedDistribution, CRPS_LEVELS};
use crate::conformal::DcpConformalPrediction;
use crate::dist::PredictiveDistribution;
use crate::error::{Error, Result};
use crate::num::{pairwise_mean, quantile_type7};

/// Version tag embedded in serialized reports.
pub const REPORT_SCHEMA_VERSION: u32 = 1;

/// Default number of interior grid points for the calibration error.
pub const DEFAULT_PCE_GRID: usize = 100;

/// Interior evaluation grid alpha_j = j / (m + 1), j = 1..m. Excludes the
/// endpoints 0 and 1 where every empirical CDF is trivially correct.
pub fn pce_grid(m: usize) -> Vec<f64> {
    (1..=m).map(|j| j as f64 / (m as f64 + 1.0)).collect()
}

/// Probabilistic calibration error of a PIT sample:
/// (1/M) sum_j |alpha_j - Fhat(alpha_j)|^p on the grid alpha_j = j/(M+1),
/// where Fhat is the empirical CDF of the PITs. No 1/p root is taken.
///
/// `p = 1` (see [`pce1`]) is the headline variant; it approximates the
/// 1-Wasserstein distance between the PIT law and the uniform law.
pub fn pce(pits: &[f64], grid_size: usize, p: f64) -> Result<f64> {
    if pits.is_empty() {
        return Err(Error::invalid("PCE requires a non-empty PIT sample"));
    }
    if grid_size == 0 {
        return Err(Error::invalid("PCE grid size must be at least 1"));
    }
    if !p.is_finite() || p <= 0.0 {
        return Err(Error::invalid("PCE exponent p must be positive and finite"));
    }
    for &z in pits {
        if !(0.0..=1.0).contains(&z) {
            return Err(Error::invalid(format!("PIT value {z} outside [0, 1]")));
        }
    }
    let mut sorted = pits.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = sorted.len() as f64;
    let m = grid_size as f64;
    let mut terms = Vec::with_capacity(grid_size);
    for j in 1..=grid_size {
        let alpha = j as f64 / (m + 1.0);
        let ecdf = sorted.partition_point(|z| *z <= alpha) as f64 / n;
        let d = (alpha - ecdf).abs();
        terms.push(if p == 1.0 { d } else { d.powf(p) });
    }
    Ok(pairwise_mean(&terms))
}

/// Headline calibration error: [`pce`] with the default 100-point grid and
/// p = 1.
pub fn pce1(pits: &[f64]) -> Result<f64> {
    pce(pits, DEFAULT_PCE_GRID, 1.0)
}

/// Reliability-diagram data: the empirical CDF of a PIT sample on a level
/// grid, optionally with a simulated consistency band.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReliabilityCurve {
    /// Levels alpha_j the curve is evaluated at, ascending in [0, 1].
    pub grid: Vec<f64>,
    /// Empirical CDF of the PITs at each grid level; non-decreasing.
    pub empirical: Vec<f64>,
    /// Lower consistency-band edge, if a band was attached.
    pub band_low: Option<Vec<f64>>,
    /// Upper consistency-band edge, if a band was attached.
    pub band_high: Option<Vec<f64>>,
    /// Nominal coverage of the attached band (e.g. 0.9).
    pub band_level: Option<f64>,
}

/// Empirical CDF of `pits` evaluated at each level of `grid` (ascending in
/// [0, 1]). The returned curve carries no band; attach one from
/// [`consistency_band`] if desired.
pub fn reliability_curve(pits: &[f64], grid: &[f64]) -> Result<ReliabilityCurve> {
    if pits.is_empty() {
        return Err(Error::invalid(
            "reliability curve requires a non-empty PIT sample",
        ));
    }
    validate_level_grid(grid)?;
    let mut sorted = pits.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = sorted.len() as f64;
    let empirical = grid
        .iter()
        .map(|&a| sorted.partition_point(|z| *z <= a) as f64 / n)
        .collect();
    Ok(ReliabilityCurve {
        grid: grid.to_vec(),
        empirical,
        band_low: None,
        band_high: None,
        band_level: None,
    })
}

fn validate_level_grid(grid: &[f64]) -> Result<()> {
    for (i, &a) in grid.iter().enumerate() {
        if !(0.0..=1.0).contains(&a) {
            return Err(Error::invalid(format!("grid level {a} outside [0, 1]")));
        }
        if i > 0 && a < grid[i - 1] {
            return Err(Error::invalid("grid levels must be ascending"));
        }
    }
    Ok(())
}

/// Pointwise consistency band for the empirical CDF of `n` i.i.d. uniform
/// PITs: the (1-level)/2 and 1-(1-level)/2 quantiles of `Fhat_U(alpha_j)`
/// over `sims` simulated uniform samples, evaluated on `grid`.
///
/// Simulation is deterministic in `seed`. Instead of materializing `n`
/// uniforms per replication, each replication draws the vector of grid-cell
/// counts by sequential binomial splitting, which has exactly the joint law
/// of the empirical CDF at the grid points and costs O(sims * grid) overall.
pub fn consistency_band(
    n: usize,
    level: f64,
    grid: &[f64],
    sims: usize,
    seed: u64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    if n == 0 {
        return Err(Error::invalid("consistency band requires n >= 1"));
    }
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::invalid("band level must lie strictly in (0, 1)"));
    }
    if sims < 1000 {
        return Err(Error::invalid("consistency band requires sims >= 1000"));
    }
    validate_level_grid(grid)?;
    let m = grid.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // samples[j] collects Fhat_U(grid[j]) across replications.
    let mut samples = vec![Vec::with_capacity(sims); m];
    for _ in 0..sims {
        let mut remaining = n as u64;
        let mut cum = 0u64;
        let mut prev = 0.0f64;
        for (j, &g) in grid.iter().enumerate() {
            let tail = 1.0 - prev;
            let count = if remaining == 0 || tail <= 0.0 {
                0
            } else {
                let cond = ((g - prev) / tail).clamp(0.0, 1.0);
                Binomial::new(remaining, cond)
                    .map_err(|e| Error::invalid(format!("binomial cell draw: {e}")))?
                    .sample(&mut rng)
            };
            cum += count;
            remaining -= count;
            prev = g;
            samples[j].push(cum as f64 / n as f64);
        }
    }
    let lo_q = (1.0 - level) / 2.0;
    let hi_q = 1.0 - lo_q;
    let mut band_low = Vec::with_capacity(m);
    let mut band_high = Vec::with_capacity(m);
    for col in &mut samples {
        col.sort_by(|a, b| a.partial_cmp(b).unwrap());
        band_low.push(quantile_type7(col, lo_q));
        band_high.push(quantile_type7(col, hi_q));
    }
    Ok((band_low, band_high))
}

/// A per-point probabilistic prediction in any of the forms the toolkit
/// produces: a plain predictive distribution, a recalibrated one, or a
/// DCP-conformalized one.
#[derive(Debug, Clone)]
pub enum Prediction {
    Dist(PredictiveDistribution),
    Recalibrated(RecalibratedDistribution),
    DcpConformal(DcpConformalPrediction),
}

impl Prediction {
    /// CDF at `y` under the (possibly transformed) predictive law.
    pub fn cdf(&self, y: f64) -> f64 {
        match self {
            Self::Dist(d) => d.cdf(y),
            Self::Recalibrated(r) => r.cdf(y),
            Self::DcpConformal(c) => c.cdf(y),
        }
    }

    /// PIT value of an observed target; alias of [`Prediction::cdf`].
    pub fn pit(&self, y: f64) -> f64 {
        self.cdf(y)
    }

    /// Quantile at level `alpha` in (0, 1).
    pub fn quantile(&self, alpha: f64) -> Result<f64> {
        match self {
            Self::Dist(d) => d.quantile(alpha),
            Self::Recalibrated(r) => r.quantile(alpha),
            Self::DcpConformal(c) => c.quantile(alpha),
        }
    }

    /// Negative log-likelihood at `y`; `None` when the prediction has no
    /// usable density (quantile-grid based laws). Discrete transformed laws
    /// over a continuous base report +infinity rather than `None`.
    pub fn nll(&self, y: f64) -> Option<f64> {
        match self {
            Self::Dist(d) => d.nll(y).ok(),
            Self::Recalibrated(r) => r.nll(y),
            Self::DcpConformal(c) => match c.base {
                PredictiveDistribution::Mixture(_) => Some(f64::INFINITY),
                PredictiveDistribution::Grid(_) => None,
            },
        }
    }

    /// Sharpness as the predictive standard deviation; +infinity for
    /// defective laws with an unbounded sentinel atom.
    pub fn sharpness_std(&self) -> f64 {
        match self {
            Self::Dist(d) => d.sharpness_std(),
            Self::Recalibrated(r) => r.sharpness_std(),
            Self::DcpConformal(c) => c.moments().1,
        }
    }

    fn crps_with_cache(&self, y: f64, levels: &[f64], cache: &mut InverseCache) -> f64 {
        match self {
            Self::Dist(d) => d.crps(y),
            Self::Recalibrated(r) => {
                let inv = cache.inverse_for(&r.map, levels);
                r.crps_with_inverse(y, levels, inv)
            }
            Self::DcpConformal(c) => c.crps(y, levels),
        }
    }
}

/// Map-inverse values at fixed levels, cached per calibration map so that
/// evaluating many predictions sharing one map inverts it only once.
#[derive(Default)]
struct InverseCache {
    entries: Vec<(*const CalibrationMap, Vec<f64>)>,
}

impl InverseCache {
    fn inverse_for(&mut self, map: &Arc<CalibrationMap>, levels: &[f64]) -> &[f64] {
        let key = Arc::as_ptr(map);
        if let Some(i) = self.entries.iter().position(|(k, _)| *k == key) {
            return &self.entries[i].1;
        }
        let inv = map.inverse_levels(levels).expect("levels lie in (0, 1)");
        self.entries.push((key, inv));
        &self.entries.last().unwrap().1
    }
}

/// Options controlling [`evaluate`].
#[derive(Debug, Clone)]
pub struct EvalOptions {
    /// Grid size M for the calibration error and the reliability curve.
    pub pce_grid_size: usize,
    /// Exponent p of the calibration error.
    pub pce_p: f64,
    /// Number of midpoint quantile levels for quantile-score CRPS estimates
    /// of transformed laws.
    pub crps_levels: usize,
    /// Consistency band attached to the reliability curve; `None` disables.
    pub band: Option<BandOptions>,
}

/// Consistency-band settings.
#[derive(Debug, Clone)]
pub struct BandOptions {
    /// Nominal band coverage in (0, 1).
    pub level: f64,
    /// Number of uniform-sample replications (>= 1000).
    pub sims: usize,
    /// RNG seed for the replications.
    pub seed: u64,
}

impl Default for BandOptions {
    fn default() -> Self {
        Self {
            level: 0.9,
            sims: 1000,
            seed: 0,
        }
    }
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            pce_grid_size: DEFAULT_PCE_GRID,
            pce_p: 1.0,
            crps_levels: CRPS_LEVELS,
            band: Some(BandOptions::default()),
        }
    }
}

/// Per-(dataset, model, method, seed) evaluation record. Identity fields and
/// the calibration p-value are filled by the orchestration layer; `evaluate`
/// leaves them at their defaults.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvaluationReport {
    /// Report format version.
    pub schema_version: u32,
    pub dataset: String,
    pub model: String,
    pub method: String,
    pub seed: u64,
    /// Regularization weight the method selected, if any.
    pub lambda: Option<f64>,
    /// Number of evaluated (prediction, target) pairs.
    pub n_test: usize,
    /// Calibration error of the test PITs.
    pub pce: f64,
    /// Mean CRPS; +infinity propagates from defective predictive laws.
    #[serde(with = "json_f64")]
    pub crps: f64,
    /// Mean NLL; `None` when unavailable (quantile-grid predictions),
    /// +infinity when any point has zero predictive density.
    #[serde(with = "json_f64_opt")]
    pub nll: Option<f64>,
    /// Mean predictive standard deviation (sharpness; lower is sharper).
    #[serde(with = "json_f64")]
    pub sharpness_std: f64,
    /// Upper-tail p-value of the observed PCE under the finite-sample null
    /// of exact calibration, when a null distribution was supplied.
    pub pce_p_value: Option<f64>,
    /// Reliability curve of the test PITs on the PCE grid.
    pub reliability: ReliabilityCurve,
}

/// Joint evaluation of per-point predictions against observed targets:
/// calibration error, mean CRPS / NLL / sharpness with honest infinity
/// propagation, and reliability-curve data.
pub fn evaluate(
    preds: &[Prediction],
    targets: &[f64],
    opts: &EvalOptions,
) -> Result<EvaluationReport> {
    if preds.is_empty() {
        return Err(Error::invalid("evaluate requires at least one prediction"));
    }
    if preds.len() != targets.len() {
        return Err(Error::invalid(format!(
            "{} predictions vs {} targets",
            preds.len(),
            targets.len()
        )));
    }
    if let Some(t) = targets.iter().find(|t| !t.is_finite()) {
        return Err(Error::data(format!("non-finite target {t}")));
    }
    let n = preds.len();
    let levels = midpoint_levels(opts.crps_levels);
    let mut cache = InverseCache::default();

    let mut pits = Vec::with_capacity(n);
    let mut crps_terms = Vec::with_capacity(n);
    let mut std_terms = Vec::with_capacity(n);
    let mut nll_terms: Option<Vec<f64>> = Some(Vec::with_capacity(n));
    for (pred, &y) in preds.iter().zip(targets) {
        pits.push(pred.pit(y));
        crps_terms.push(pred.crps_with_cache(y, &levels, &mut cache));
        std_terms.push(pred.sharpness_std());
        if let Some(terms) = nll_terms.as_mut() {
            match pred.nll(y) {
                Some(v) => terms.push(v),
                None => nll_terms = None,
            }
        }
    }

    let pce_value = pce(&pits, opts.pce_grid_size, opts.pce_p)?;
    let grid = pce_grid(opts.pce_grid_size);
    let mut reliability = reliability_curve(&pits, &grid)?;
    if let Some(band) = &opts.band {
        let (lo, hi) = consistency_band(n, band.level, &grid, band.sims, band.seed)?;
        reliability.band_low = Some(lo);
        reliability.band_high = Some(hi);
        reliability.band_level = Some(band.level);
    }

    Ok(EvaluationReport {
        schema_version: REPORT_SCHEMA_VERSION,
        dataset: String::new(),
        model: String::new(),
        method: String::new(),
        seed: 0,
        lambda: None,
        n_test: n,
        pce: pce_value,
        crps: pairwise_mean(&crps_terms),
        nll: nll_terms.map(|t| pairwise_mean(&t)),
        sharpness_std: pairwise_mean(&std_terms),
        pce_p_value: None,
        reliability,
    })
}

/// Formats a metric value for CSV output with the same non-finite spelling
/// as the JSON reports ("inf" / "-inf" / "nan").
pub(crate) fn csv_number(v: f64) -> String {
    if v.is_nan() {
        "nan".to_string()
    } else {
        format!("{v}")
    }
}

/// JSON cannot represent non-finite numbers; serialize them as the strings
/// "inf" / "-inf" / "nan" and accept either form when reading.
pub(crate) mod json_f64 {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Serialize, Deserialize)]
    #[serde(untagged)]
    pub(crate) enum Repr {
        Num(f64),
        Tag(String),
    }

    pub(crate) fn to_repr(v: f64) -> Repr {
        if v.is_finite() {
            Repr::Num(v)
        } else if v.is_nan() {
            Repr::Tag("nan".into())
        } else if v > 0.0 {
            Repr::Tag("inf".into())
        } else {
            Repr::Tag("-inf".into())
        }
    }

    pub(crate) fn from_repr<E: serde::de::Error>(repr: Repr) -> Result<f64, E> {
        match repr {
            Repr::Num(x) => Ok(x),
            Repr::Tag(t) => match t.as_str() {
                "inf" => Ok(f64::INFINITY),
                "-inf" => Ok(f64::NEG_INFINITY),
                "nan" => Ok(f64::NAN),
                other => Err(E::custom(format!("unrecognized numeric tag {other:?}"))),
            },
        }
    }

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        to_repr(*v).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        from_repr(Repr::deserialize(d)?)
    }
}

/// `Option<f64>` variant of [`json_f64`]: `None` maps to JSON null.
pub(crate) mod json_f64_opt {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    use super::json_f64::{from_repr, to_repr, Repr};

    pub fn serialize<S: Serializer>(v: &Option<f64>, s: S) -> Result<S::Ok, S::Error> {
        match v {
            Some(x) => to_repr(*x).serialize(s),
            None => s.serialize_none(),
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<f64>, D::Error> {
        match Option::<Repr>::deserialize(d)? {
            Some(repr) => Ok(Some(from_repr(repr)?)),
            None => Ok(None),
        }
    }
}
