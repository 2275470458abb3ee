//! Split conformal prediction for regression: conformity scores on a
//! calibration set, finite-sample thresholds, and conformalized quantiles.
//!
//! With N' calibration scores S_1..S_N' and the sentinel S_(N'+1) = +infinity,
//! the threshold for level alpha is the order statistic at rank
//! ceil((N'+1) alpha). For i.i.d. continuous scores the conformalized
//! quantile then covers with probability exactly ceil((N'+1) alpha)/(N'+1).

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::dist::PredictiveDistribution;
use crate::error::{Error, Result};
use crate::num::ceil_rank_index;

/// Conformity score family.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ScoreKind {
    /// Quantile-residual score S = y - Q(alpha0 | x) for a fixed base level.
    Cqr { alpha0: f64 },
    /// CDF score S = F(y | x), i.e. the PIT.
    Dcp,
}

/// Conformity scores for a batch of (prediction, target) pairs.
pub fn conformity_scores(
    kind: ScoreKind,
    dists: &[PredictiveDistribution],
    targets: &[f64],
) -> Result<Vec<f64>> {
    if dists.is_empty() || dists.len() != targets.len() {
        return Err(Error::invalid(
            "conformity scores require equal-length, non-empty predictions and targets",
        ));
    }
    match kind {
        ScoreKind::Cqr { alpha0 } => {
            if !(alpha0 > 0.0 && alpha0 < 1.0) {
                return Err(Error::domain(format!(
                    "CQR base level must be in (0,1), got {alpha0}"
                )));
            }
            dists
                .iter()
                .zip(targets)
                .map(|(d, &y)| Ok(y - d.quantile_unit(alpha0)))
                .collect()
        }
        ScoreKind::Dcp => Ok(dists.iter().zip(targets).map(|(d, &y)| d.pit(y)).collect()),
    }
}

/// A fitted conformal calibrator: the score kind plus sorted scores.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "CalibratorRepr", into = "CalibratorRepr")]
pub struct ConformalCalibrator {
    kind: ScoreKind,
    scores: Vec<f64>,
}

/// Serialized form: {kind, alpha0 (CQR only), scores}.
#[derive(Serialize, Deserialize)]
struct CalibratorRepr {
    kind: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    alpha0: Option<f64>,
    scores: Vec<f64>,
}

impl From<ConformalCalibrator> for CalibratorRepr {
    fn from(c: ConformalCalibrator) -> Self {
        match c.kind {
            ScoreKind::Cqr { alpha0 } => CalibratorRepr {
                kind: "cqr".into(),
                alpha0: Some(alpha0),
                scores: c.scores,
            },
            ScoreKind::Dcp => CalibratorRepr { kind: "dcp".into(), alpha0: None, scores: c.scores },
        }
    }
}

impl TryFrom<CalibratorRepr> for ConformalCalibrator {
    type Error = Error;

    fn try_from(r: CalibratorRepr) -> Result<Self> {
        let kind = match (r.kind.as_str(), r.alpha0) {
            ("cqr", Some(alpha0)) => ScoreKind::Cqr { alpha0 },
            ("dcp", None) => ScoreKind::Dcp,
            _ => return Err(Error::invalid("calibrator kind/alpha0 mismatch")),
        };
        ConformalCalibrator::from_scores(kind, r.scores)
    }
}

impl ConformalCalibrator {
    /// Fits a calibrator by scoring a calibration set.
    pub fn fit(
        kind: ScoreKind,
        dists: &[PredictiveDistribution],
        targets: &[f64],
    ) -> Result<Self> {
        let scores = conformity_scores(kind, dists, targets)?;
        Self::from_scores(kind, scores)
    }

    /// Builds a calibrator from precomputed scores.
    pub fn from_scores(kind: ScoreKind, scores: Vec<f64>) -> Result<Self> {
        if scores.is_empty() {
            return Err(Error::invalid("calibrator requires at least one score"));
        }
        if scores.iter().any(|s| !s.is_finite()) {
            return Err(Error::invalid("conformity scores must be finite"));
        }
        let mut scores = scores;
        scores.sort_by(|a, b| a.partial_cmp(b).unwrap());
        Ok(Self { kind, scores })
    }

    pub fn kind(&self) -> ScoreKind {
        self.kind
    }

    /// Sorted calibration scores.
    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    /// Finite-sample threshold: the score order statistic at rank
    /// ceil((N'+1) alpha) among {S_1..S_N', +infinity}; +infinity when the
    /// rank exceeds N'.
    pub fn threshold(&self, alpha: f64) -> Result<f64> {
        if !(alpha > 0.0 && alpha < 1.0) {
            return Err(Error::domain(format!(
                "conformal threshold requires alpha in (0,1), got {alpha}"
            )));
        }
        let n = self.scores.len();
        let idx = ceil_rank_index(n, alpha);
        Ok(if idx > n { f64::INFINITY } else { self.scores[idx - 1] })
    }

    /// Conformalized quantile for one prediction:
    /// * CQR: Q(alpha0 | x) + threshold(alpha)
    /// * DCP: Q(threshold(alpha) | x), where the threshold is a CDF score;
    ///   the +infinity sentinel propagates to +infinity.
    pub fn conformalized_quantile(
        &self,
        dist: &PredictiveDistribution,
        alpha: f64,
    ) -> Result<f64> {
        let q_hat = self.threshold(alpha)?;
        Ok(match self.kind {
            ScoreKind::Cqr { alpha0 } => dist.quantile_unit(alpha0) + q_hat,
            ScoreKind::Dcp => {
                if q_hat.is_finite() {
                    dist.quantile_unit(q_hat.clamp(0.0, 1.0))
                } else {
                    f64::INFINITY
                }
            }
        })
    }

    /// Exact coverage level attained by `threshold(alpha)` under continuous
    /// scores: ceil((N'+1) alpha) / (N'+1).
    pub fn exact_coverage(&self, alpha: f64) -> f64 {
        let n = self.scores.len();
        ceil_rank_index(n, alpha) as f64 / (n + 1) as f64
    }
}

/// A base distribution conformalized with DCP (CDF) scores, exposed as a
/// distribution: the CDF counts calibration scores below the base PIT and
/// quantiles go through the conformal threshold. Distribution-identical to
/// recalibration with a DCP map but computed through the conformal route.
#[derive(Debug, Clone)]
pub struct DcpConformalPrediction {
    pub base: PredictiveDistribution,
    pub cal: Arc<ConformalCalibrator>,
}

impl DcpConformalPrediction {
    pub fn new(base: PredictiveDistribution, cal: Arc<ConformalCalibrator>) -> Result<Self> {
        if !matches!(cal.kind(), ScoreKind::Dcp) {
            return Err(Error::invalid(
                "DCP conformal prediction requires a DCP-score calibrator",
            ));
        }
        Ok(Self { base, cal })
    }

    /// Conformalized CDF: #{S_i <= F(y)} / (N'+1).
    pub fn cdf(&self, y: f64) -> f64 {
        let z = self.base.cdf(y);
        let n = self.cal.scores.len();
        let count = self.cal.scores.partition_point(|s| *s <= z);
        count as f64 / (n + 1) as f64
    }

    pub fn pit(&self, y: f64) -> f64 {
        self.cdf(y)
    }

    pub fn quantile(&self, alpha: f64) -> Result<f64> {
        self.cal.conformalized_quantile(&self.base, alpha)
    }

    /// CRPS by averaging the quantile score over midpoint levels; +infinity
    /// when a level's threshold is the sentinel.
    pub fn crps(&self, y: f64, levels: &[f64]) -> f64 {
        let mut acc = 0.0;
        for &a in levels {
            let q = self.cal.conformalized_quantile(&self.base, a).unwrap();
            let ind = if y <= q { 1.0 } else { 0.0 };
            acc += 2.0 * (ind - a) * (q - y);
        }
        acc / levels.len() as f64
    }

    /// The conformalized law is discrete (atoms at the score order
    /// statistics plus an unbounded sentinel atom); mean/std over the atoms,
    /// +infinity std on an unbounded base support.
    pub fn moments(&self) -> (f64, f64) {
        let n = self.cal.scores.len() as f64;
        let denom = n + 1.0;
        let mut s1 = 0.0;
        let mut s2 = 0.0;
        for &s in &self.cal.scores {
            let q = self.base.quantile_unit(s.clamp(0.0, 1.0));
            s1 += q / denom;
            s2 += q * q / denom;
        }
        let q = self.base.quantile_unit(1.0);
        s1 += q / denom;
        s2 += q * q / denom;
        if !(s1.is_finite() && s2.is_finite()) {
            return (f64::NAN, f64::INFINITY);
        }
        (s1, (s2 - s1 * s1).max(0.0).sqrt())
    }
}

/// Per-level CQR conformalization of a shared quantile grid: one calibrator
/// per grid level, each at its own base level.
#[derive(Debug, Clone)]
pub struct GridCqr {
    levels: Vec<f64>,
    calibrators: Vec<ConformalCalibrator>,
}

impl GridCqr {
    /// Fits one CQR calibrator per grid level on the calibration set. All
    /// predictions must be quantile grids over the same levels.
    pub fn fit(dists: &[PredictiveDistribution], targets: &[f64]) -> Result<Self> {
        let levels = match dists.first() {
            Some(PredictiveDistribution::Grid(g)) => g.levels().to_vec(),
            _ => {
                return Err(Error::invalid(
                    "grid CQR requires non-empty quantile-grid predictions",
                ))
            }
        };
        if dists.iter().any(|d| match d {
            PredictiveDistribution::Grid(g) => g.levels() != levels.as_slice(),
            _ => true,
        }) {
            return Err(Error::invalid("grid CQR requires a shared level grid"));
        }
        let calibrators = levels
            .iter()
            .map(|&a| ConformalCalibrator::fit(ScoreKind::Cqr { alpha0: a }, dists, targets))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { levels, calibrators })
    }

    pub fn levels(&self) -> &[f64] {
        &self.levels
    }

    pub fn calibrators(&self) -> &[ConformalCalibrator] {
        &self.calibrators
    }

    /// Conformalizes one grid prediction: each level's value is adjusted by
    /// its own threshold at its own level; the grid constructor re-sorts,
    /// repairing any crossing. Errors when a threshold is the +infinity
    /// sentinel (calibration set too small for the outermost level).
    pub fn apply(&self, dist: &PredictiveDistribution) -> Result<PredictiveDistribution> {
        let g = match dist {
            PredictiveDistribution::Grid(g) if g.levels() == self.levels.as_slice() => g,
            _ => return Err(Error::invalid("prediction grid does not match calibrators")),
        };
        let mut values = Vec::with_capacity(self.levels.len());
        for (j, &a) in self.levels.iter().enumerate() {
            let q_hat = self.calibrators[j].threshold(a)?;
            if !q_hat.is_finite() {
                return Err(Error::invalid(format!(
                    "CQR threshold at level {a} is unbounded; calibration set too small"
                )));
            }
            values.push(g.values()[j] + q_hat);
        }
        Ok(PredictiveDistribution::Grid(crate::dist::QuantileGrid::new(
            self.levels.clone(),
            values,
        )?))
    }
}
