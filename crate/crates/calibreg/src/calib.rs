//! PIT-based recalibration: calibration maps fitted on held-out PIT values
//! and the distributions obtained by composing a map with a base CDF.
//!
//! A calibration map phi: [0,1] -> [0,1] estimates the CDF of the PIT values
//! Z = F(Y|X). Composing phi with the base CDF (F' = phi o F) yields a model
//! whose own PITs are closer to uniform. Four estimators are provided:
//!
//! * `Emp`  — empirical step CDF, phi(a) = #{z_i <= a} / N
//! * `Lin`  — piecewise-linear CDF through (z_(k), k/(N+1)) plotting
//!   positions with exact (0,0) and (1,1) endpoints
//! * `Kde`  — logistic-kernel smoothed CDF, phi(a) = mean sigma(tau (a - z_i))
//! * `Dcp`  — finite-sample step CDF phi(a) = #{z_i <= a} / (N+1), whose
//!   inverse is the order statistic z_(ceil((N+1) a)) with a +infinity
//!   sentinel at rank N+1 (represented on the PIT scale as 1)

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::dist::PredictiveDistribution;
use crate::error::{Error, Result};
use crate::num::{ceil_rank_index, sigmoid, sigmoid_deriv};

/// Default sharpness of the logistic kernel for KDE maps.
pub const DEFAULT_KDE_TAU: f64 = 100.0;

/// Number of quantile levels used to score recalibrated distributions whose
/// CRPS has no closed form.
pub const CRPS_LEVELS: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MapKind {
    Emp,
    Lin,
    Kde,
    Dcp,
}

/// A monotone recalibration map fitted on PIT values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "MapRepr", into = "MapRepr")]
pub struct CalibrationMap {
    kind: MapKind,
    /// KDE kernel sharpness; None for the other kinds.
    tau: Option<f64>,
    /// Fitted PIT values, sorted ascending.
    pits: Vec<f64>,
    /// Knots of the LIN map, (x, y) with both coordinates strictly
    /// increasing; rebuilt from `pits` on deserialization.
    #[serde(skip)]
    lin_knots: Vec<(f64, f64)>,
}

/// Serialized form: exactly {kind, tau, pits}.
#[derive(Serialize, Deserialize)]
struct MapRepr {
    kind: MapKind,
    tau: Option<f64>,
    pits: Vec<f64>,
}

impl From<CalibrationMap> for MapRepr {
    fn from(m: CalibrationMap) -> Self {
        MapRepr { kind: m.kind, tau: m.tau, pits: m.pits }
    }
}

impl TryFrom<MapRepr> for CalibrationMap {
    type Error = Error;

    fn try_from(r: MapRepr) -> Result<Self> {
        CalibrationMap::fit(r.kind, &r.pits, r.tau)
    }
}

impl CalibrationMap {
    /// Fits a calibration map on PIT values (each in [0,1]). `tau` is the
    /// KDE kernel sharpness (default 100) and must be absent for the other
    /// kinds.
    pub fn fit(kind: MapKind, pits: &[f64], tau: Option<f64>) -> Result<Self> {
        if pits.is_empty() {
            return Err(Error::invalid("calibration map requires at least one PIT"));
        }
        if pits.iter().any(|z| !z.is_finite() || *z < 0.0 || *z > 1.0) {
            return Err(Error::invalid("PIT values must lie in [0,1]"));
        }
        let tau = match (kind, tau) {
            (MapKind::Kde, t) => {
                let t = t.unwrap_or(DEFAULT_KDE_TAU);
                if !(t.is_finite() && t > 0.0) {
                    return Err(Error::invalid("KDE tau must be positive and finite"));
                }
                Some(t)
            }
            (_, None) => None,
            (_, Some(_)) => {
                return Err(Error::invalid("tau is only meaningful for KDE maps"));
            }
        };
        let mut pits = pits.to_vec();
        pits.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let lin_knots = if kind == MapKind::Lin {
            lin_knots(&pits)
        } else {
            Vec::new()
        };
        Ok(Self { kind, tau, pits, lin_knots })
    }

    pub fn kind(&self) -> MapKind {
        self.kind
    }

    pub fn tau(&self) -> Option<f64> {
        self.tau
    }

    /// Fitted PITs, sorted ascending.
    pub fn pits(&self) -> &[f64] {
        &self.pits
    }

    fn count_le(&self, a: f64) -> usize {
        self.pits.partition_point(|z| *z <= a)
    }

    /// Evaluates the map at `alpha` in [0,1].
    pub fn apply(&self, alpha: f64) -> f64 {
        let n = self.pits.len() as f64;
        match self.kind {
            MapKind::Emp => self.count_le(alpha) as f64 / n,
            MapKind::Dcp => self.count_le(alpha) as f64 / (n + 1.0),
            MapKind::Kde => {
                let tau = self.tau.unwrap();
                let mut acc = 0.0;
                for z in &self.pits {
                    acc += sigmoid(tau * (alpha - z));
                }
                acc / n
            }
            MapKind::Lin => {
                let ks = &self.lin_knots;
                if alpha <= 0.0 {
                    return 0.0;
                }
                if alpha >= 1.0 {
                    return 1.0;
                }
                let j = ks.partition_point(|k| k.0 <= alpha);
                // 0 < alpha < 1 and knots span [0,1], so 1 <= j < len.
                let (x0, y0) = ks[j - 1];
                let (x1, y1) = ks[j];
                y0 + (y1 - y0) * (alpha - x0) / (x1 - x0)
            }
        }
    }

    /// Generalized inverse of the map at `alpha` in (0,1].
    ///
    /// * `Emp`: inf{t : apply(t) >= alpha} = z_(ceil(alpha N))
    /// * `Lin`: exact piecewise-linear inverse
    /// * `Kde`: bisection on [0,1] to |apply(t) - alpha| <= 1e-10 (clamped
    ///   at the boundary when alpha is outside the attainable range)
    /// * `Dcp`: z_(ceil((N+1) alpha)) with the rank-(N+1) sentinel mapped to
    ///   PIT value 1 (the +infinity order statistic)
    pub fn inverse(&self, alpha: f64) -> Result<f64> {
        if !(alpha > 0.0 && alpha <= 1.0) {
            return Err(Error::domain(format!(
                "map inverse requires alpha in (0,1], got {alpha}"
            )));
        }
        let n = self.pits.len();
        Ok(match self.kind {
            MapKind::Emp => {
                let t = alpha * n as f64;
                let idx = ((t - 1e-9).ceil().max(1.0) as usize).min(n);
                self.pits[idx - 1]
            }
            MapKind::Dcp => {
                let idx = ceil_rank_index(n, alpha);
                if idx > n {
                    1.0
                } else {
                    self.pits[idx - 1]
                }
            }
            MapKind::Lin => {
                let ks = &self.lin_knots;
                if alpha >= 1.0 {
                    return Ok(1.0);
                }
                let j = ks.partition_point(|k| k.1 <= alpha);
                let (x0, y0) = ks[j - 1];
                let (x1, y1) = ks[j];
                x0 + (x1 - x0) * (alpha - y0) / (y1 - y0)
            }
            MapKind::Kde => {
                if self.apply(0.0) >= alpha {
                    return Ok(0.0);
                }
                if self.apply(1.0) <= alpha {
                    return Ok(1.0);
                }
                let (mut lo, mut hi) = (0.0f64, 1.0f64);
                let mut mid = 0.5;
                for _ in 0..200 {
                    mid = 0.5 * (lo + hi);
                    let f = self.apply(mid);
                    if (f - alpha).abs() <= 1e-10 {
                        break;
                    }
                    if f < alpha {
                        lo = mid;
                    } else {
                        hi = mid;
                    }
                }
                mid
            }
        })
    }

    /// Map inverse at many levels (levels must be in (0,1]). Cheaper than
    /// repeated `inverse` calls for KDE maps and used by evaluation loops.
    pub fn inverse_levels(&self, levels: &[f64]) -> Result<Vec<f64>> {
        levels.iter().map(|&a| self.inverse(a)).collect()
    }

    /// ln of the map derivative at `alpha`: -infinity for the step maps
    /// (EMP/DCP), the segment slope for LIN, and the analytic kernel-sum
    /// derivative for KDE. This is the Jacobian correction that turns a base
    /// log-density into the recalibrated log-density.
    pub fn log_derivative(&self, alpha: f64) -> f64 {
        match self.kind {
            MapKind::Emp | MapKind::Dcp => f64::NEG_INFINITY,
            MapKind::Kde => {
                let tau = self.tau.unwrap();
                let mut acc = 0.0;
                for z in &self.pits {
                    acc += tau * sigmoid_deriv(tau * (alpha - z));
                }
                (acc / self.pits.len() as f64).ln()
            }
            MapKind::Lin => {
                let ks = &self.lin_knots;
                let a = alpha.clamp(0.0, 1.0);
                let j = ks.partition_point(|k| k.0 <= a).clamp(1, ks.len() - 1);
                let (x0, y0) = ks[j - 1];
                let (x1, y1) = ks[j];
                ((y1 - y0) / (x1 - x0)).ln()
            }
        }
    }

    /// Probability mass the map assigns to each cell of a partition of
    /// [0,1] given by `edges` (ascending, starting at 0 and ending at 1).
    /// Exact for all kinds; used for pushforward moment quadrature.
    pub fn cell_masses(&self, edges: &[f64]) -> Vec<f64> {
        let mut prev = self.apply(edges[0]);
        let mut out = Vec::with_capacity(edges.len() - 1);
        for &e in &edges[1..] {
            let cur = self.apply(e);
            out.push((cur - prev).max(0.0));
            prev = cur;
        }
        out
    }
}

/// LIN knots: (0,0), one knot per distinct PIT value at the mean of its
/// plotting positions k/(N+1), and (1,1). Duplicated PIT values collapse
/// into a single knot; PITs exactly at 0 or 1 are absorbed by the endpoint
/// anchors so that the endpoints stay exact.
fn lin_knots(sorted_pits: &[f64]) -> Vec<(f64, f64)> {
    let n = sorted_pits.len();
    let denom = (n + 1) as f64;
    let mut knots = vec![(0.0, 0.0)];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && sorted_pits[j + 1] == sorted_pits[i] {
            j += 1;
        }
        // Plotting positions (i+1)/(n+1) ..= (j+1)/(n+1); their mean is the
        // midpoint of the first and last.
        let y = 0.5 * ((i + 1) as f64 + (j + 1) as f64) / denom;
        let x = sorted_pits[i];
        if x > 0.0 && x < 1.0 {
            knots.push((x, y));
        }
        i = j + 1;
    }
    knots.push((1.0, 1.0));
    knots
}

/// Composes a base predictive distribution with a calibration map:
/// F'(y) = phi(F(y)).
pub fn recalibrate(
    base: PredictiveDistribution,
    map: Arc<CalibrationMap>,
) -> RecalibratedDistribution {
    RecalibratedDistribution { base, map }
}

/// A base distribution composed with a calibration map. Quantiles go through
/// the map inverse; densities pick up the map-derivative Jacobian.
#[derive(Debug, Clone)]
pub struct RecalibratedDistribution {
    pub base: PredictiveDistribution,
    pub map: Arc<CalibrationMap>,
}

impl RecalibratedDistribution {
    /// Recalibrated CDF, phi(F(y)).
    pub fn cdf(&self, y: f64) -> f64 {
        self.map.apply(self.base.cdf(y))
    }

    /// PIT under the recalibrated model.
    pub fn pit(&self, y: f64) -> f64 {
        self.cdf(y)
    }

    /// Recalibrated quantile Q'(alpha) = Q_base(phi^{-1}(alpha)) for alpha in
    /// (0,1). When the map inverse hits a boundary PIT (the DCP sentinel or
    /// a PIT of exactly 0/1), the base quantile extends to the support
    /// endpoint (+/-infinity for mixtures).
    pub fn quantile(&self, alpha: f64) -> Result<f64> {
        if !(alpha > 0.0 && alpha < 1.0) {
            return Err(Error::domain(format!(
                "recalibrated quantile requires alpha in (0,1), got {alpha}"
            )));
        }
        let u = self.map.inverse(alpha)?;
        Ok(self.base.quantile_unit(u))
    }

    /// Recalibrated log-density: log f(y) + log phi'(F(y)). -infinity for
    /// step maps (the recalibrated law is discrete); None when the base has
    /// no density (quantile grids).
    pub fn log_density(&self, y: f64) -> Option<f64> {
        match &self.base {
            PredictiveDistribution::Mixture(gm) => {
                Some(gm.log_pdf(y) + self.map.log_derivative(gm.cdf(y)))
            }
            PredictiveDistribution::Grid(_) => None,
        }
    }

    /// Negative log-likelihood; +infinity sentinel for step maps, None when
    /// the base has no density.
    pub fn nll(&self, y: f64) -> Option<f64> {
        self.log_density(y).map(|l| -l)
    }

    /// CRPS estimated by averaging the quantile score over `CRPS_LEVELS`
    /// equidistant midpoint levels. +infinity when a level maps to an
    /// unbounded quantile (DCP sentinel on a mixture base).
    pub fn crps(&self, y: f64) -> f64 {
        let levels = midpoint_levels(CRPS_LEVELS);
        let inv = self.map.inverse_levels(&levels).expect("levels in (0,1)");
        self.crps_with_inverse(y, &levels, &inv)
    }

    /// CRPS with precomputed map-inverse values for the given levels; lets
    /// evaluation loops share the (possibly expensive) inverse across points.
    pub fn crps_with_inverse(&self, y: f64, levels: &[f64], inv: &[f64]) -> f64 {
        let mut acc = 0.0;
        for (j, &u) in inv.iter().enumerate() {
            let q = self.base.quantile_unit(u);
            let ind = if y <= q { 1.0 } else { 0.0 };
            acc += 2.0 * (ind - levels[j]) * (q - y);
        }
        acc / levels.len() as f64
    }

    /// Mean and standard deviation of the pushforward distribution.
    ///
    /// For the step maps the pushforward is discrete on the fitted PITs and
    /// the moments are computed exactly over those atoms (a DCP sentinel or
    /// a boundary PIT contributes an unbounded atom on a mixture base, and
    /// the result is +infinity). For LIN/KDE the moments use midpoint
    /// quadrature over 1024 cells with exact per-cell masses.
    pub fn moments(&self) -> (f64, f64) {
        match self.map.kind() {
            MapKind::Emp | MapKind::Dcp => {
                let pits = self.map.pits();
                let n = pits.len() as f64;
                let denom = if self.map.kind() == MapKind::Emp { n } else { n + 1.0 };
                let mut s1 = 0.0;
                let mut s2 = 0.0;
                for &z in pits {
                    let q = self.base.quantile_unit(z);
                    s1 += q / denom;
                    s2 += q * q / denom;
                }
                if self.map.kind() == MapKind::Dcp {
                    // Sentinel mass 1/(N+1) at the upper support endpoint.
                    let q = self.base.quantile_unit(1.0);
                    s1 += q / denom;
                    s2 += q * q / denom;
                }
                if !(s1.is_finite() && s2.is_finite()) {
                    return (f64::NAN, f64::INFINITY);
                }
                (s1, (s2 - s1 * s1).max(0.0).sqrt())
            }
            MapKind::Lin | MapKind::Kde => {
                const CELLS: usize = 1024;
                let edges: Vec<f64> = (0..=CELLS).map(|i| i as f64 / CELLS as f64).collect();
                let masses = self.map.cell_masses(&edges);
                let mut s1 = 0.0;
                let mut s2 = 0.0;
                for (i, &w) in masses.iter().enumerate() {
                    if w == 0.0 {
                        continue;
                    }
                    let mid = (i as f64 + 0.5) / CELLS as f64;
                    let q = self.base.quantile_unit(mid);
                    s1 += w * q;
                    s2 += w * q * q;
                }
                // KDE maps leak a little mass outside (0,1); renormalize so
                // the moments describe the attainable range.
                let total: f64 = masses.iter().sum();
                if total > 0.0 {
                    s1 /= total;
                    s2 /= total;
                }
                (s1, (s2 - s1 * s1).max(0.0).sqrt())
            }
        }
    }

    /// Sharpness as the pushforward standard deviation.
    pub fn sharpness_std(&self) -> f64 {
        self.moments().1
    }
}

/// Midpoint levels (j - 1/2) / m for j = 1..=m.
pub fn midpoint_levels(m: usize) -> Vec<f64> {
    (1..=m).map(|j| (j as f64 - 0.5) / m as f64).collect()
}
