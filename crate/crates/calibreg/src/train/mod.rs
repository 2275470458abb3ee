//! Neural-network training for probabilistic regression.
//!
//! Models are fully connected rectifier networks with either a Gaussian
//! mixture head or a quantile head, fit with Adam on a proper scoring rule
//! plus an optional calibration regularizer:
//!
//!   objective = base loss + lambda * regularizer.
//!
//! All gradients are written out analytically (see [`objective_grad`] for a
//! finite-difference-friendly entry point). Training is bitwise
//! deterministic for a fixed seed: initialization, batch shuffling, and
//! dropout all draw from one seeded generator, and with `lambda = 0` the
//! parameter trajectory is identical to an unregularized run.

mod adam;
mod head;
mod loss;
mod mlp;
mod reg;
mod softsort;

pub use head::Head;
pub use reg::{reg_pce_kde, reg_pce_sort, reg_qr, reg_trunc};

use ndarray::{Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::calib::midpoint_levels;
use crate::dist::PredictiveDistribution;
use crate::error::{Error, Result};
use crate::metrics::{csv_number, pce, pce_grid, DEFAULT_PCE_GRID};

use adam::Adam;
use head::{decode_mixture, decode_quantile, grid_pit, PitGrad, QuantileGradPoint};
use mlp::{Grads, Mlp};

pub const DEFAULT_BATCH_SIZE: usize = 512;
pub const DEFAULT_LEARNING_RATE: f64 = 1e-3;
pub const DEFAULT_MAX_EPOCHS: usize = 1000;
pub const DEFAULT_PATIENCE: usize = 30;
/// Temperature of the differentiable sort used by sort-based regularizers.
pub const DEFAULT_TAU_SORT: f64 = 100.0;
/// Number of probability levels the truncation penalty monitors by default.
pub const DEFAULT_TRUNC_LEVELS: usize = 16;
/// Version tag written into serialized model files.
pub const MODEL_SCHEMA_VERSION: u32 = 1;

/// Architecture and initialization of the network.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct NetworkConfig {
    /// Number of hidden layers (all rectifier-activated).
    pub hidden_layers: usize,
    /// Width of each hidden layer.
    pub units: usize,
    /// Dropout rate on the last hidden layer, in [0, 1).
    pub dropout_rate: f64,
    pub head: Head,
    /// Seed for initialization, batch shuffling, and dropout.
    pub seed: u64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            hidden_layers: 3,
            units: 100,
            dropout_rate: 0.2,
            head: Head::Mixture { k: 3 },
            seed: 0,
        }
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden_layers == 0 || self.units == 0 {
            return Err(Error::invalid("network needs at least one hidden unit"));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::invalid("dropout rate must lie in [0, 1)"));
        }
        self.head.validate()
    }
}

/// Base (proper scoring rule) training losses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaseLoss {
    /// Negative log-likelihood; mixture head only.
    Nll,
    /// Closed-form CRPS for mixtures, mean quantile score for grids.
    Crps,
    /// Mean quantile (pinball) score over the head's levels; quantile head
    /// only.
    PinballGrid,
}

/// Calibration regularizers added to the base loss.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Regularizer {
    None,
    /// Spacing penalty [`reg_qr`]; `k = None` picks ceil(sqrt(batch size)).
    Qr { k: Option<usize> },
    /// Truncation penalty [`reg_trunc`] on `levels` equally spaced quantile
    /// levels (a quantile head always uses its own native levels).
    Trunc { levels: usize },
    /// Smoothed calibration error [`reg_pce_kde`] on the standard level grid.
    PceKde { tau: f64, p: f64 },
    /// Sorted-PIT calibration error [`reg_pce_sort`].
    PceSort { p: f64 },
}

/// Optimization settings.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub base_loss: BaseLoss,
    pub regularizer: Regularizer,
    /// Regularization strength; 0 recovers the plain base loss exactly.
    pub lambda: f64,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub max_epochs: usize,
    /// Epochs without validation-loss improvement before stopping.
    pub patience: usize,
    /// Temperature for the differentiable sort inside sort-based penalties.
    pub tau_sort: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            base_loss: BaseLoss::Nll,
            regularizer: Regularizer::None,
            lambda: 0.0,
            batch_size: DEFAULT_BATCH_SIZE,
            learning_rate: DEFAULT_LEARNING_RATE,
            max_epochs: DEFAULT_MAX_EPOCHS,
            patience: DEFAULT_PATIENCE,
            tau_sort: DEFAULT_TAU_SORT,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.lambda.is_finite() || self.lambda < 0.0 {
            return Err(Error::invalid("lambda must be finite and >= 0"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch size must be positive"));
        }
        if !self.learning_rate.is_finite() || self.learning_rate <= 0.0 {
            return Err(Error::invalid("learning rate must be finite and positive"));
        }
        if self.patience == 0 {
            return Err(Error::invalid("patience must be at least one epoch"));
        }
        if self.tau_sort.is_nan() || self.tau_sort <= 0.0 {
            return Err(Error::invalid("tau_sort must be positive"));
        }
        match self.regularizer {
            Regularizer::None => Ok(()),
            Regularizer::Qr { k } => {
                if k == Some(0) {
                    Err(Error::invalid("spacing order k must be at least 1"))
                } else {
                    Ok(())
                }
            }
            Regularizer::Trunc { levels } => {
                if levels == 0 {
                    Err(Error::invalid("truncation penalty needs at least one level"))
                } else {
                    Ok(())
                }
            }
            Regularizer::PceKde { tau, p } => {
                if tau.is_nan() || tau <= 0.0 || !p.is_finite() || p <= 0.0 {
                    Err(Error::invalid("KDE penalty needs tau > 0 and finite p > 0"))
                } else {
                    Ok(())
                }
            }
            Regularizer::PceSort { p } => {
                if !p.is_finite() || p <= 0.0 {
                    Err(Error::invalid("sort penalty needs finite p > 0"))
                } else {
                    Ok(())
                }
            }
        }
    }
}

/// Per-epoch training record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// Mean batch objective (base loss + lambda * regularizer).
    pub train_loss: f64,
    /// Validation base loss (used for early stopping).
    pub val_loss: f64,
    pub val_pce: f64,
    pub val_crps: f64,
}

/// A fitted network together with its architecture and training history.
#[derive(Debug, Clone)]
pub struct TrainedModel {
    mlp: Mlp,
    net: NetworkConfig,
    in_dim: usize,
    log: Vec<EpochLog>,
}

#[derive(Serialize, Deserialize)]
struct ModelFile {
    schema_version: u32,
    in_dim: usize,
    net: NetworkConfig,
    params: Vec<f64>,
}

impl TrainedModel {
    pub fn network(&self) -> &NetworkConfig {
        &self.net
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    /// Per-epoch history, in order; empty if `max_epochs` was 0.
    pub fn log(&self) -> &[EpochLog] {
        &self.log
    }

    /// Flat parameter vector (layer by layer: weights row-major, then
    /// biases; output layer last).
    pub fn params(&self) -> Vec<f64> {
        self.mlp.params_vec()
    }

    pub fn set_params(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.mlp.param_count() {
            return Err(Error::invalid(format!(
                "expected {} parameters, got {}",
                self.mlp.param_count(),
                params.len()
            )));
        }
        self.mlp.set_params(params);
        Ok(())
    }

    /// Predictive distributions for a batch of inputs (rows).
    pub fn predict_batch(&self, x: &Array2<f64>) -> Result<Vec<PredictiveDistribution>> {
        if x.ncols() != self.in_dim {
            return Err(Error::invalid(format!(
                "expected {} input features, got {}",
                self.in_dim,
                x.ncols()
            )));
        }
        let cache = self.mlp.forward(x.view(), None);
        let mut out = Vec::with_capacity(x.nrows());
        match self.net.head {
            Head::Mixture { k } => {
                let c = decode_mixture(&cache.out, k);
                for i in 0..c.n() {
                    out.push(PredictiveDistribution::Mixture(c.dist(i)?));
                }
            }
            Head::Quantile { m } => {
                let levels = midpoint_levels(m);
                let qc = decode_quantile(&cache.out, &levels);
                for i in 0..qc.n() {
                    out.push(PredictiveDistribution::Grid(qc.dist(i)?));
                }
            }
        }
        Ok(out)
    }

    /// Predictive distribution for a single input point.
    pub fn predict(&self, x: &[f64]) -> Result<PredictiveDistribution> {
        let row = Array2::from_shape_vec((1, x.len()), x.to_vec())
            .map_err(|e| Error::invalid(e.to_string()))?;
        Ok(self.predict_batch(&row)?.pop().expect("one prediction"))
    }

    /// Serializes architecture + parameters as versioned JSON (the training
    /// log is reported separately as CSV; see [`TrainedModel::write_log_csv`]).
    pub fn to_json(&self) -> Result<String> {
        let file = ModelFile {
            schema_version: MODEL_SCHEMA_VERSION,
            in_dim: self.in_dim,
            net: self.net.clone(),
            params: self.params(),
        };
        Ok(serde_json::to_string(&file)?)
    }

    /// Rebuilds a model from [`TrainedModel::to_json`] output.
    pub fn from_json(text: &str) -> Result<TrainedModel> {
        let file: ModelFile = serde_json::from_str(text)?;
        if file.schema_version != MODEL_SCHEMA_VERSION {
            return Err(Error::invalid(format!(
                "unsupported model schema version {}",
                file.schema_version
            )));
        }
        file.net.validate()?;
        if file.in_dim == 0 {
            return Err(Error::invalid("model input dimension must be positive"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(file.net.seed);
        let mut mlp = Mlp::new(
            file.in_dim,
            file.net.hidden_layers,
            file.net.units,
            file.net.head.out_dim(),
            file.net.dropout_rate,
            &mut rng,
        );
        if file.params.len() != mlp.param_count() {
            return Err(Error::invalid(format!(
                "model file has {} parameters, architecture needs {}",
                file.params.len(),
                mlp.param_count()
            )));
        }
        mlp.set_params(&file.params);
        Ok(TrainedModel {
            mlp,
            net: file.net,
            in_dim: file.in_dim,
            log: Vec::new(),
        })
    }

    /// Writes the training history as CSV
    /// (epoch, train_loss, val_loss, val_pce, val_crps).
    pub fn write_log_csv<W: std::io::Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["epoch", "train_loss", "val_loss", "val_pce", "val_crps"])?;
        for e in &self.log {
            w.write_record([
                e.epoch.to_string(),
                csv_number(e.train_loss),
                csv_number(e.val_loss),
                csv_number(e.val_pce),
                csv_number(e.val_crps),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Mean base loss of predictions against targets. NLL requires mixture
/// predictions; the pinball-grid score requires quantile-grid predictions;
/// CRPS accepts both.
pub fn batch_loss(kind: BaseLoss, preds: &[PredictiveDistribution], targets: &[f64]) -> Result<f64> {
    if preds.is_empty() || preds.len() != targets.len() {
        return Err(Error::invalid(
            "predictions and targets must be non-empty and match",
        ));
    }
    let n = preds.len() as f64;
    let mut sum = 0.0;
    for (d, &y) in preds.iter().zip(targets) {
        sum += match kind {
            BaseLoss::Nll => d.nll(y)?,
            BaseLoss::Crps => d.crps(y),
            BaseLoss::PinballGrid => match d {
                PredictiveDistribution::Grid(g) => g.crps(y),
                PredictiveDistribution::Mixture(_) => {
                    return Err(Error::Unsupported(
                        "pinball-grid loss is defined for quantile-grid predictions".into(),
                    ))
                }
            },
        };
    }
    Ok(sum / n)
}

/// Rejects loss/head pairings that have no definition.
fn check_loss_head(base: BaseLoss, head: Head) -> Result<()> {
    match (base, head) {
        (BaseLoss::Nll, Head::Quantile { .. }) => Err(Error::Unsupported(
            "NLL training is not defined for a quantile head".into(),
        )),
        (BaseLoss::PinballGrid, Head::Mixture { .. }) => Err(Error::Unsupported(
            "pinball-grid training requires a quantile head".into(),
        )),
        _ => Ok(()),
    }
}

fn default_spacing_order(n: usize) -> usize {
    ((n as f64).sqrt().ceil() as usize).clamp(1, n - 1)
}

/// Objective value and parameter gradient for one batch.
fn compute_batch(
    mlp: &Mlp,
    head: Head,
    levels: Option<&[f64]>,
    cfg: &TrainConfig,
    x: ArrayView2<f64>,
    y: &[f64],
    mask: Option<Array2<f64>>,
) -> Result<(f64, Grads)> {
    let n = y.len();
    let cache = mlp.forward(x, mask);
    // Regularizers are batch statistics; a single point has none.
    let regularize =
        cfg.lambda > 0.0 && !matches!(cfg.regularizer, Regularizer::None) && n >= 2;
    match head {
        Head::Mixture { k } => {
            let c = decode_mixture(&cache.out, k);
            let mut base = match cfg.base_loss {
                BaseLoss::Nll => loss::nll_mixture(&c, y),
                BaseLoss::Crps => loss::crps_mixture(&c, y),
                BaseLoss::PinballGrid => {
                    return Err(Error::Unsupported(
                        "pinball-grid training requires a quantile head".into(),
                    ))
                }
            };
            let mut value = base.value;
            if regularize {
                match cfg.regularizer {
                    Regularizer::Qr { .. }
                    | Regularizer::PceSort { .. }
                    | Regularizer::PceKde { .. } => {
                        let pits: Vec<PitGrad> = (0..n).map(|i| c.pit_grad(i, y[i])).collect();
                        let z: Vec<f64> = pits.iter().map(|p| p.z).collect();
                        let (rv, dz) = pit_penalty_grad(&cfg.regularizer, &z, cfg.tau_sort)?;
                        value += cfg.lambda * rv;
                        for i in 0..n {
                            let w = cfg.lambda * dz[i];
                            if w == 0.0 {
                                continue;
                            }
                            for j in 0..k {
                                base.d_mu[[i, j]] += w * pits[i].d_mu[j];
                                base.d_sigma[[i, j]] += w * pits[i].d_sigma[j];
                                base.d_w[[i, j]] += w * pits[i].d_w[j];
                            }
                        }
                    }
                    Regularizer::Trunc { levels: count } => {
                        let lv = pce_grid(count);
                        let mut q = Array2::zeros((n, count));
                        let mut parts: Vec<QuantileGradPoint> = Vec::with_capacity(n * count);
                        for i in 0..n {
                            let gm = c.dist(i)?;
                            for (j, &alpha) in lv.iter().enumerate() {
                                let g = c.quantile_grad(i, alpha, &gm);
                                q[[i, j]] = g.q;
                                parts.push(g);
                            }
                        }
                        let (rv, dq) = reg::reg_trunc_grad(&q, y, &lv)?;
                        value += cfg.lambda * rv;
                        for i in 0..n {
                            for j in 0..count {
                                let w = cfg.lambda * dq[[i, j]];
                                if w == 0.0 {
                                    continue;
                                }
                                let part = &parts[i * count + j];
                                for comp in 0..k {
                                    base.d_mu[[i, comp]] += w * part.d_mu[comp];
                                    base.d_sigma[[i, comp]] += w * part.d_sigma[comp];
                                    base.d_w[[i, comp]] += w * part.d_w[comp];
                                }
                            }
                        }
                    }
                    Regularizer::None => unreachable!(),
                }
            }
            let raw = c.raw_grad(&base.d_mu, &base.d_sigma, &base.d_w);
            Ok((value, mlp.backward(&cache, &raw)))
        }
        Head::Quantile { .. } => {
            let lv = levels.expect("quantile head levels");
            let qc = decode_quantile(&cache.out, lv);
            let (base_value, mut d_q) = match cfg.base_loss {
                BaseLoss::PinballGrid | BaseLoss::Crps => loss::crps_grid(&qc, y),
                BaseLoss::Nll => {
                    return Err(Error::Unsupported(
                        "NLL training is not defined for a quantile head".into(),
                    ))
                }
            };
            let mut value = base_value;
            if regularize {
                match cfg.regularizer {
                    Regularizer::Qr { .. }
                    | Regularizer::PceSort { .. }
                    | Regularizer::PceKde { .. } => {
                        let mut z = vec![0.0; n];
                        let mut row_grads = Vec::with_capacity(n);
                        for i in 0..n {
                            let row = qc.sorted.row(i);
                            let (zi, gi) =
                                grid_pit(lv, row.as_slice().expect("contiguous row"), y[i]);
                            z[i] = zi;
                            row_grads.push(gi);
                        }
                        let (rv, dz) = pit_penalty_grad(&cfg.regularizer, &z, cfg.tau_sort)?;
                        value += cfg.lambda * rv;
                        for i in 0..n {
                            let w = cfg.lambda * dz[i];
                            if w == 0.0 {
                                continue;
                            }
                            for (slot, g) in row_grads[i].iter().enumerate() {
                                d_q[[i, slot]] += w * g;
                            }
                        }
                    }
                    Regularizer::Trunc { .. } => {
                        // The head already predicts quantiles at its own
                        // levels, so the penalty reads them off directly.
                        let (rv, dq) = reg::reg_trunc_grad(&qc.sorted, y, lv)?;
                        value += cfg.lambda * rv;
                        d_q.scaled_add(cfg.lambda, &dq);
                    }
                    Regularizer::None => unreachable!(),
                }
            }
            let raw = qc.raw_grad(&d_q);
            Ok((value, mlp.backward(&cache, &raw)))
        }
    }
}

/// Shared dispatch for the PIT-based penalties.
fn pit_penalty_grad(
    reg: &Regularizer,
    pits: &[f64],
    tau_sort: f64,
) -> Result<(f64, Vec<f64>)> {
    match *reg {
        Regularizer::Qr { k } => {
            let order = k.unwrap_or_else(|| default_spacing_order(pits.len()));
            reg::reg_qr_grad(pits, order, tau_sort)
        }
        Regularizer::PceSort { p } => reg::reg_pce_sort_grad(pits, p, tau_sort),
        Regularizer::PceKde { tau, p } => {
            reg::reg_pce_kde_grad(pits, &pce_grid(DEFAULT_PCE_GRID), tau, p)
        }
        _ => unreachable!("not a PIT penalty"),
    }
}

/// Objective value and flat parameter gradient of `model` on one batch,
/// without dropout (the objective is then a deterministic function of the
/// parameters, which is what finite-difference verification needs).
pub fn objective_grad(
    model: &TrainedModel,
    cfg: &TrainConfig,
    x: &Array2<f64>,
    y: &[f64],
) -> Result<(f64, Vec<f64>)> {
    cfg.validate()?;
    check_loss_head(cfg.base_loss, model.net.head)?;
    if x.nrows() != y.len() || y.is_empty() {
        return Err(Error::invalid("inputs and targets must be non-empty and match"));
    }
    if x.ncols() != model.in_dim {
        return Err(Error::invalid("input width does not match the model"));
    }
    let levels = match model.net.head {
        Head::Quantile { m } => Some(midpoint_levels(m)),
        Head::Mixture { .. } => None,
    };
    let (value, grads) =
        compute_batch(&model.mlp, model.net.head, levels.as_deref(), cfg, x.view(), y, None)?;
    Ok((value, grads.into_vec()))
}

/// Validation-set base loss, calibration error, and CRPS.
fn validation_metrics(
    mlp: &Mlp,
    head: Head,
    levels: Option<&[f64]>,
    base: BaseLoss,
    x: &Array2<f64>,
    y: &[f64],
) -> Result<(f64, f64, f64)> {
    let cache = mlp.forward(x.view(), None);
    let n = y.len();
    let mut pits = Vec::with_capacity(n);
    let mut loss_sum = 0.0;
    let mut crps_sum = 0.0;
    match head {
        Head::Mixture { k } => {
            let c = decode_mixture(&cache.out, k);
            for (i, &yi) in y.iter().enumerate() {
                let gm = c.dist(i)?;
                pits.push(gm.cdf(yi));
                crps_sum += gm.crps(yi);
                loss_sum += match base {
                    BaseLoss::Nll => gm.nll(yi),
                    _ => gm.crps(yi),
                };
            }
        }
        Head::Quantile { .. } => {
            let qc = decode_quantile(&cache.out, levels.expect("levels"));
            for (i, &yi) in y.iter().enumerate() {
                let g = qc.dist(i)?;
                pits.push(g.cdf(yi));
                let c = g.crps(yi);
                crps_sum += c;
                loss_sum += c;
            }
        }
    }
    let val_pce = pce(&pits, DEFAULT_PCE_GRID, 1.0)?;
    Ok((loss_sum / n as f64, val_pce, crps_sum / n as f64))
}

fn check_matrix(x: &Array2<f64>, y: &[f64], name: &str) -> Result<()> {
    if x.nrows() == 0 || x.ncols() == 0 {
        return Err(Error::invalid(format!("{name} inputs must be non-empty")));
    }
    if x.nrows() != y.len() {
        return Err(Error::invalid(format!(
            "{name} inputs and targets must have matching length"
        )));
    }
    if x.iter().any(|v| !v.is_finite()) || y.iter().any(|v| !v.is_finite()) {
        return Err(Error::Data(format!("{name} data contains non-finite values")));
    }
    Ok(())
}

/// Fits a network on the training split, monitoring the validation split.
///
/// Runs mini-batch Adam for at most `max_epochs` epochs, stopping early
/// after `patience` epochs without a strict improvement in validation base
/// loss, and returns the model restored to its best-validation parameters.
/// A non-finite training loss aborts with a diagnostic error.
pub fn train(
    net: &NetworkConfig,
    cfg: &TrainConfig,
    x_train: &Array2<f64>,
    y_train: &[f64],
    x_val: &Array2<f64>,
    y_val: &[f64],
) -> Result<TrainedModel> {
    net.validate()?;
    cfg.validate()?;
    check_loss_head(cfg.base_loss, net.head)?;
    check_matrix(x_train, y_train, "training")?;
    check_matrix(x_val, y_val, "validation")?;
    if x_train.ncols() != x_val.ncols() {
        return Err(Error::invalid("training and validation widths differ"));
    }

    let in_dim = x_train.ncols();
    let mut rng = ChaCha8Rng::seed_from_u64(net.seed);
    let mut mlp = Mlp::new(
        in_dim,
        net.hidden_layers,
        net.units,
        net.head.out_dim(),
        net.dropout_rate,
        &mut rng,
    );
    let levels = match net.head {
        Head::Quantile { m } => Some(midpoint_levels(m)),
        Head::Mixture { .. } => None,
    };
    let mut adam = Adam::new(cfg.learning_rate, mlp.param_count());
    let mut params = mlp.params_vec();
    let mut best_params = params.clone();
    let mut best_val = f64::INFINITY;
    let mut wait = 0usize;
    let mut log = Vec::new();
    let n = x_train.nrows();
    let mut order: Vec<usize> = (0..n).collect();

    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut rng);
        let mut batch_sum = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let xb = x_train.select(Axis(0), chunk);
            let yb: Vec<f64> = chunk.iter().map(|&i| y_train[i]).collect();
            let mask = mlp.sample_dropout_mask(xb.nrows(), &mut rng);
            let (value, grads) =
                compute_batch(&mlp, net.head, levels.as_deref(), cfg, xb.view(), &yb, mask)?;
            if !value.is_finite() {
                return Err(Error::Train(format!(
                    "non-finite training loss ({value}) at epoch {epoch}"
                )));
            }
            adam.step(&mut params, &grads.into_vec());
            mlp.set_params(&params);
            batch_sum += value;
            batches += 1;
        }
        let (val_loss, val_pce, val_crps) =
            validation_metrics(&mlp, net.head, levels.as_deref(), cfg.base_loss, x_val, y_val)?;
        if val_loss.is_nan() {
            return Err(Error::Train(format!("NaN validation loss at epoch {epoch}")));
        }
        log.push(EpochLog {
            epoch,
            train_loss: batch_sum / batches as f64,
            val_loss,
            val_pce,
            val_crps,
        });
        if val_loss < best_val {
            best_val = val_loss;
            best_params.copy_from_slice(&params);
            wait = 0;
        } else {
            wait += 1;
            if wait >= cfg.patience {
                break;
            }
        }
    }

    mlp.set_params(&best_params);
    Ok(TrainedModel {
        mlp,
        net: net.clone(),
        in_dim,
        log,
    })
}

/// Validation metrics of one candidate regularization strength.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LambdaCandidate {
    pub lambda: f64,
    pub val_crps: f64,
    pub val_pce: f64,
}

/// Picks the regularization strength with the best validation calibration
/// subject to a sharpness budget: among candidates whose validation CRPS is
/// within 10% of the unregularized (`lambda = 0`) CRPS, returns the one with
/// the smallest validation calibration error, breaking ties (within 1e-12)
/// toward the smaller lambda. The candidate set must include `lambda = 0`,
/// which is always feasible.
pub fn select_lambda(candidates: &[LambdaCandidate]) -> Result<f64> {
    if candidates.is_empty() {
        return Err(Error::invalid("no lambda candidates"));
    }
    for c in candidates {
        if !c.lambda.is_finite() || c.lambda < 0.0 {
            return Err(Error::invalid("lambda candidates must be finite and >= 0"));
        }
        if c.val_crps.is_nan() || c.val_pce.is_nan() {
            return Err(Error::invalid("candidate metrics must not be NaN"));
        }
    }
    let base = candidates
        .iter()
        .find(|c| c.lambda == 0.0)
        .ok_or_else(|| Error::invalid("candidates must include lambda = 0"))?;
    let budget = 1.1 * base.val_crps;
    let mut sorted: Vec<&LambdaCandidate> = candidates.iter().collect();
    sorted.sort_by(|a, b| a.lambda.partial_cmp(&b.lambda).unwrap());
    let mut best: Option<(f64, f64)> = None; // (pce, lambda)
    for c in sorted {
        if c.val_crps <= budget {
            match best {
                None => best = Some((c.val_pce, c.lambda)),
                Some((bp, _)) if c.val_pce < bp - 1e-12 => best = Some((c.val_pce, c.lambda)),
                _ => {}
            }
        }
    }
    Ok(best.expect("lambda = 0 is always feasible").1)
}
