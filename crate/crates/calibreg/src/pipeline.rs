//! End-to-end experiment orchestration: load and split a dataset, train base
//! models, apply calibration methods, and evaluate on the held-out test
//! split in the original target scale.
//!
//! A [`RunConfig`] names one dataset, one base model, and a list of methods;
//! [`run_pipeline`] executes every (seed, method) combination, isolating
//! failures per combination so sibling runs still complete. Jobs run
//! concurrently (capped by the `CALIBREG_THREADS` environment variable),
//! each internally single-threaded, and results merge in a fixed order, so
//! identical configs produce byte-identical reports.
//!
//! Leakage discipline: calibration maps and conformity scores are fitted
//! only on the split named by [`RunConfig::posthoc_source`]; the test split
//! is touched exclusively by the final evaluation.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

use crate::calib::{recalibrate, CalibrationMap, MapKind, CRPS_LEVELS, DEFAULT_KDE_TAU};
use crate::conformal::{ConformalCalibrator, DcpConformalPrediction, GridCqr, ScoreKind};
use crate::data::{
    self, prepare_dataset, SplitDataset, MIN_ROWS,
};
use crate::dist::PredictiveDistribution;
use crate::error::{Error, Result};
use crate::metrics::{
    evaluate, BandOptions, EvalOptions, EvaluationReport, Prediction, DEFAULT_PCE_GRID,
};
use crate::report::{emit_report, ReportFormat};
use crate::stats::{simulate_null_pce, NullPceDistribution, DEFAULT_NULL_SIMS};
use crate::train::{
    select_lambda, train, BaseLoss, Head, LambdaCandidate, NetworkConfig, Regularizer,
    TrainConfig, TrainedModel, DEFAULT_TRUNC_LEVELS,
};

/// Fixed seed of the consistency-band simulation, so bands (and therefore
/// reports) are reproducible across runs.
const BAND_SEED: u64 = 9001;
/// Fixed seed of the null calibration-error simulation behind p-values.
const NULL_SEED: u64 = 4242;

/// Where the data comes from: a CSV file or a built-in synthetic generator.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum DataSource {
    Csv { path: PathBuf, target: String },
    Synthetic { synthetic: SyntheticKind, n: usize },
}

impl DataSource {
    /// Label used in reports.
    pub fn name(&self) -> String {
        match self {
            DataSource::Csv { path, .. } => path
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| "dataset".to_string()),
            DataSource::Synthetic { synthetic, .. } => synthetic.label().to_string(),
        }
    }

    fn load(&self, seed: u64) -> Result<SplitDataset> {
        match self {
            DataSource::Csv { path, target } => prepare_dataset(path, target, seed),
            DataSource::Synthetic { synthetic, n } => {
                let (x, y) = synthetic.generate(*n, seed);
                SplitDataset::from_arrays(&x, &y, seed)
            }
        }
    }
}

/// Built-in generators with known conditional laws.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SyntheticKind {
    LinearGaussian,
    SinusoidalHetero,
    HeavyTailed,
}

impl SyntheticKind {
    pub fn label(self) -> &'static str {
        match self {
            SyntheticKind::LinearGaussian => "linear-gaussian",
            SyntheticKind::SinusoidalHetero => "sinusoidal-hetero",
            SyntheticKind::HeavyTailed => "heavy-tailed",
        }
    }

    pub fn generate(self, n: usize, seed: u64) -> (ndarray::Array2<f64>, Vec<f64>) {
        match self {
            SyntheticKind::LinearGaussian => data::synthetic_linear_gaussian(n, seed),
            SyntheticKind::SinusoidalHetero => data::synthetic_sinusoidal_hetero(n, seed),
            SyntheticKind::HeavyTailed => data::synthetic_heavy_tailed(n, seed),
        }
    }
}

/// Base probabilistic model families.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    /// Gaussian mixture head trained by negative log-likelihood.
    MixNll,
    /// Gaussian mixture head trained by closed-form CRPS.
    MixCrps,
    /// Simultaneous quantile grid trained by the mean pinball score.
    SqrCrps,
}

impl ModelKind {
    pub fn label(self) -> &'static str {
        match self {
            ModelKind::MixNll => "mix-nll",
            ModelKind::MixCrps => "mix-crps",
            ModelKind::SqrCrps => "sqr-crps",
        }
    }

    fn head(self, mixture_components: usize, quantile_levels: usize) -> Head {
        match self {
            ModelKind::MixNll | ModelKind::MixCrps => Head::Mixture {
                k: mixture_components,
            },
            ModelKind::SqrCrps => Head::Quantile { m: quantile_levels },
        }
    }

    fn base_loss(self) -> BaseLoss {
        match self {
            ModelKind::MixNll => BaseLoss::Nll,
            ModelKind::MixCrps => BaseLoss::Crps,
            ModelKind::SqrCrps => BaseLoss::PinballGrid,
        }
    }
}

/// Calibration methods the pipeline can attach to a base model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MethodKind {
    /// The base model unchanged.
    None,
    /// Post-hoc quantile recalibration, empirical map.
    RecEmp,
    /// Post-hoc quantile recalibration, linear-interpolated map.
    RecLin,
    /// Post-hoc quantile recalibration, kernel-smoothed map.
    RecKde,
    /// Post-hoc quantile recalibration, conformal (rank-based) map.
    RecDcp,
    /// Conformalized quantile regression on the grid levels.
    Cqr,
    /// Distributional conformal prediction.
    Dcp,
    /// Regularized training with the spacing penalty.
    Qr,
    /// Regularized training with the truncation penalty.
    Trunc,
    /// Regularized training with the kernel-smoothed calibration error.
    PceKde,
    /// Regularized training with the sorted-PIT calibration error.
    PceSort,
}

impl MethodKind {
    pub fn label(self) -> &'static str {
        match self {
            MethodKind::None => "none",
            MethodKind::RecEmp => "rec-emp",
            MethodKind::RecLin => "rec-lin",
            MethodKind::RecKde => "rec-kde",
            MethodKind::RecDcp => "rec-dcp",
            MethodKind::Cqr => "cqr",
            MethodKind::Dcp => "dcp",
            MethodKind::Qr => "qr",
            MethodKind::Trunc => "trunc",
            MethodKind::PceKde => "pce-kde",
            MethodKind::PceSort => "pce-sort",
        }
    }

    /// Methods that retrain the network with a calibration penalty.
    pub fn is_regularizer(self) -> bool {
        matches!(
            self,
            MethodKind::Qr | MethodKind::Trunc | MethodKind::PceKde | MethodKind::PceSort
        )
    }

    fn regularizer(self) -> Option<Regularizer> {
        match self {
            MethodKind::Qr => Some(Regularizer::Qr { k: None }),
            MethodKind::Trunc => Some(Regularizer::Trunc {
                levels: DEFAULT_TRUNC_LEVELS,
            }),
            MethodKind::PceKde => Some(Regularizer::PceKde {
                tau: DEFAULT_KDE_TAU,
                p: 1.0,
            }),
            MethodKind::PceSort => Some(Regularizer::PceSort { p: 1.0 }),
        _ => Option::None,
        }
    }
}

/// Which split post-hoc methods fit their maps and scores on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PosthocSource {
    #[default]
    Calib,
    Train,
}

/// One experiment: a dataset, a base model, and the methods to compare.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub dataset: DataSource,
    pub model: ModelKind,
    pub methods: Vec<MethodKind>,
    /// Regularization strengths tried by regularized methods; 0 is always
    /// included implicitly.
    pub lambda_grid: Vec<f64>,
    pub posthoc_source: PosthocSource,
    pub seeds: Vec<u64>,
    pub out: PathBuf,
    pub formats: Vec<ReportFormat>,
    // Network / optimization knobs (defaults match the training engine).
    pub hidden_layers: usize,
    pub units: usize,
    pub dropout_rate: f64,
    pub mixture_components: usize,
    pub quantile_levels: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub max_epochs: usize,
    pub patience: usize,
    /// Replications behind the reliability-diagram consistency band.
    pub band_sims: usize,
    /// Nominal coverage of the consistency band.
    pub band_level: f64,
    /// Simulations behind the calibration p-value; 0 disables p-values.
    pub null_sims: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let train = TrainConfig::default();
        let net = NetworkConfig::default();
        Self {
            dataset: DataSource::Synthetic {
                synthetic: SyntheticKind::SinusoidalHetero,
                n: 2000,
            },
            model: ModelKind::MixNll,
            methods: vec![MethodKind::None],
            lambda_grid: vec![0.0],
            posthoc_source: PosthocSource::default(),
            seeds: (0..5).collect(),
            out: PathBuf::from("calibreg-out"),
            formats: vec![ReportFormat::Json, ReportFormat::Csv, ReportFormat::Svg],
            hidden_layers: net.hidden_layers,
            units: net.units,
            dropout_rate: net.dropout_rate,
            mixture_components: 3,
            quantile_levels: 64,
            batch_size: train.batch_size,
            learning_rate: train.learning_rate,
            max_epochs: train.max_epochs,
            patience: train.patience,
            band_sims: 1000,
            band_level: 0.9,
            null_sims: DEFAULT_NULL_SIMS,
        }
    }
}

impl RunConfig {
    /// Checks the cross-field invariants: non-empty distinct seeds and
    /// methods, a usable lambda grid, and method/model compatibility
    /// (conformalized quantile regression needs a quantile-grid model).
    pub fn validate(&self) -> Result<()> {
        if self.methods.is_empty() {
            return Err(Error::invalid("config needs at least one method"));
        }
        if self.seeds.is_empty() {
            return Err(Error::invalid("config needs at least one seed"));
        }
        let mut seeds = self.seeds.clone();
        seeds.sort_unstable();
        seeds.dedup();
        if seeds.len() != self.seeds.len() {
            return Err(Error::invalid("seeds must be distinct"));
        }
        let mut methods = self.methods.clone();
        methods.dedup();
        if methods.len() != self.methods.len()
            || (1..methods.len()).any(|i| methods[..i].contains(&methods[i]))
        {
            return Err(Error::invalid("methods must be distinct"));
        }
        if self.methods.contains(&MethodKind::Cqr) && self.model != ModelKind::SqrCrps {
            return Err(Error::invalid(
                "conformalized quantile regression requires the quantile-grid model",
            ));
        }
        for &l in &self.lambda_grid {
            if !l.is_finite() || l < 0.0 {
                return Err(Error::invalid(format!("lambda {l} must be finite and >= 0")));
            }
        }
        if let DataSource::Synthetic { n, .. } = self.dataset {
            if n < MIN_ROWS {
                return Err(Error::invalid(format!(
                    "synthetic datasets need at least {MIN_ROWS} rows"
                )));
            }
        }
        self.network(0).validate()?;
        self.train_config(Regularizer::None, 0.0).validate()
    }

    fn network(&self, seed: u64) -> NetworkConfig {
        NetworkConfig {
            hidden_layers: self.hidden_layers,
            units: self.units,
            dropout_rate: self.dropout_rate,
            head: self
                .model
                .head(self.mixture_components, self.quantile_levels),
            seed,
        }
    }

    fn train_config(&self, regularizer: Regularizer, lambda: f64) -> TrainConfig {
        TrainConfig {
            base_loss: self.model.base_loss(),
            regularizer,
            lambda,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            max_epochs: self.max_epochs,
            patience: self.patience,
            ..TrainConfig::default()
        }
    }

    /// The lambda grid with 0 inserted, sorted ascending, deduplicated.
    fn effective_lambda_grid(&self) -> Vec<f64> {
        let mut grid = self.lambda_grid.clone();
        grid.push(0.0);
        grid.sort_by(|a, b| a.partial_cmp(b).unwrap());
        grid.dedup();
        grid
    }

    fn eval_options(&self) -> EvalOptions {
        EvalOptions {
            pce_grid_size: DEFAULT_PCE_GRID,
            pce_p: 1.0,
            crps_levels: CRPS_LEVELS,
            band: Some(BandOptions {
                level: self.band_level,
                sims: self.band_sims,
                seed: BAND_SEED,
            }),
        }
    }
}

/// A (seed, method) combination that did not produce a report.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunFailure {
    pub dataset: String,
    pub model: String,
    pub method: String,
    pub seed: u64,
    pub message: String,
}

/// Everything a pipeline run produced: one report per successful
/// (seed, method) combination plus the isolated failures.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub reports: Vec<EvaluationReport>,
    pub failures: Vec<RunFailure>,
}

/// Per-seed shared state: the splits, the unregularized base model, its
/// test-set predictions in the original target scale, and the post-hoc
/// fitting material drawn from the configured source split.
struct SeedContext {
    ds: SplitDataset,
    /// Base-model predictive laws on the test split, original scale.
    test_dists: Vec<PredictiveDistribution>,
    /// Test targets, original scale.
    test_y: Vec<f64>,
    /// Base-model PITs on the post-hoc source split (scale-free).
    posthoc_pits: Vec<f64>,
    /// Base-model laws on the post-hoc source split, original scale.
    posthoc_dists: Vec<PredictiveDistribution>,
    /// Post-hoc source targets, original scale.
    posthoc_y: Vec<f64>,
    /// Validation CRPS / calibration error of the base model (normalized
    /// scale), the lambda = 0 selection candidate.
    base_val: (f64, f64),
}

fn build_seed_context(cfg: &RunConfig, seed: u64) -> Result<SeedContext> {
    let ds = cfg.dataset.load(seed)?;
    let net = cfg.network(seed);
    let train_cfg = cfg.train_config(Regularizer::None, 0.0);
    let base = train(&net, &train_cfg, &ds.train_x, &ds.train_y, &ds.val_x, &ds.val_y)?;
    let base_val = validation_scores(cfg, &base, &ds)?;

    let test_norm = base.predict_batch(&ds.test_x)?;
    let test_dists: Vec<PredictiveDistribution> = test_norm
        .iter()
        .map(|d| d.affine(ds.target_std, ds.target_mean))
        .collect::<Result<_>>()?;
    let test_y: Vec<f64> = ds.test_y.iter().map(|&y| ds.original_target(y)).collect();

    let (src_x, src_y) = match cfg.posthoc_source {
        PosthocSource::Calib => (&ds.cal_x, &ds.cal_y),
        PosthocSource::Train => (&ds.train_x, &ds.train_y),
    };
    let posthoc_norm = base.predict_batch(src_x)?;
    let posthoc_pits: Vec<f64> = posthoc_norm
        .iter()
        .zip(src_y)
        .map(|(d, &y)| d.pit(y))
        .collect();
    let posthoc_dists: Vec<PredictiveDistribution> = posthoc_norm
        .iter()
        .map(|d| d.affine(ds.target_std, ds.target_mean))
        .collect::<Result<_>>()?;
    let posthoc_y: Vec<f64> = src_y.iter().map(|&y| ds.original_target(y)).collect();

    Ok(SeedContext {
        ds,
        test_dists,
        test_y,
        posthoc_pits,
        posthoc_dists,
        posthoc_y,
        base_val,
    })
}

/// Validation CRPS and calibration error of a model (normalized scale, no
/// band), used as lambda-selection candidates.
fn validation_scores(cfg: &RunConfig, model: &TrainedModel, ds: &SplitDataset) -> Result<(f64, f64)> {
    let preds: Vec<Prediction> = model
        .predict_batch(&ds.val_x)?
        .into_iter()
        .map(Prediction::Dist)
        .collect();
    let opts = EvalOptions {
        band: Option::None,
        ..cfg.eval_options()
    };
    let report = evaluate(&preds, &ds.val_y, &opts)?;
    Ok((report.crps, report.pce))
}

/// Test-set predictions of one method, plus the selected regularization
/// strength for regularized methods.
fn method_predictions(
    cfg: &RunConfig,
    ctx: &SeedContext,
    seed: u64,
    method: MethodKind,
) -> Result<(Vec<Prediction>, Option<f64>)> {
    match method {
        MethodKind::None => Ok((
            ctx.test_dists.iter().cloned().map(Prediction::Dist).collect(),
            Option::None,
        )),
        MethodKind::RecEmp | MethodKind::RecLin | MethodKind::RecKde | MethodKind::RecDcp => {
            let kind = match method {
                MethodKind::RecEmp => MapKind::Emp,
                MethodKind::RecLin => MapKind::Lin,
                MethodKind::RecKde => MapKind::Kde,
                _ => MapKind::Dcp,
            };
            let map = Arc::new(CalibrationMap::fit(kind, &ctx.posthoc_pits, Option::None)?);
            Ok((
                ctx.test_dists
                    .iter()
                    .map(|d| Prediction::Recalibrated(recalibrate(d.clone(), Arc::clone(&map))))
                    .collect(),
                Option::None,
            ))
        }
        MethodKind::Dcp => {
            // The same PIT scores the recalibration map uses, so that the
            // rank-based map and the conformal calibrator stay numerically
            // identical.
            let cal = Arc::new(ConformalCalibrator::from_scores(
                ScoreKind::Dcp,
                ctx.posthoc_pits.clone(),
            )?);
            ctx.test_dists
                .iter()
                .map(|d| {
                    DcpConformalPrediction::new(d.clone(), Arc::clone(&cal))
                        .map(Prediction::DcpConformal)
                })
                .collect::<Result<Vec<_>>>()
                .map(|preds| (preds, Option::None))
        }
        MethodKind::Cqr => {
            let cqr = GridCqr::fit(&ctx.posthoc_dists, &ctx.posthoc_y)?;
            ctx.test_dists
                .iter()
                .map(|d| cqr.apply(d).map(Prediction::Dist))
                .collect::<Result<Vec<_>>>()
                .map(|preds| (preds, Option::None))
        }
        MethodKind::Qr | MethodKind::Trunc | MethodKind::PceKde | MethodKind::PceSort => {
            let regularizer = method.regularizer().expect("regularized method");
            let net = cfg.network(seed);
            let mut candidates = Vec::new();
            let mut models: Vec<Option<TrainedModel>> = Vec::new();
            for &lambda in &cfg.effective_lambda_grid() {
                if lambda == 0.0 {
                    // A zero-weight penalty trains identically to the base
                    // model, which is already fitted; reuse it.
                    candidates.push(LambdaCandidate {
                        lambda,
                        val_crps: ctx.base_val.0,
                        val_pce: ctx.base_val.1,
                    });
                    models.push(Option::None);
                    continue;
                }
                let train_cfg = cfg.train_config(regularizer, lambda);
                let model = train(
                    &net,
                    &train_cfg,
                    &ctx.ds.train_x,
                    &ctx.ds.train_y,
                    &ctx.ds.val_x,
                    &ctx.ds.val_y,
                )?;
                let (val_crps, val_pce) = validation_scores(cfg, &model, &ctx.ds)?;
                candidates.push(LambdaCandidate {
                    lambda,
                    val_crps,
                    val_pce,
                });
                models.push(Some(model));
            }
            let chosen = select_lambda(&candidates)?;
            let idx = candidates
                .iter()
                .position(|c| c.lambda == chosen)
                .expect("selected lambda comes from the candidate grid");
            let dists = match &models[idx] {
                Some(model) => {
                    let norm = model.predict_batch(&ctx.ds.test_x)?;
                    norm.iter()
                        .map(|d| d.affine(ctx.ds.target_std, ctx.ds.target_mean))
                        .collect::<Result<Vec<_>>>()?
                }
                Option::None => ctx.test_dists.clone(),
            };
            Ok((dists.into_iter().map(Prediction::Dist).collect(), Some(chosen)))
        }
    }
}

fn job_thread_cap() -> usize {
    match std::env::var("CALIBREG_THREADS") {
        Ok(v) => v.parse::<usize>().ok().filter(|&t| t >= 1).unwrap_or(1),
        Err(_) => std::thread::available_parallelism().map_or(1, |p| p.get()),
    }
}

/// Runs `jobs` closures over an index range on a bounded worker pool,
/// collecting results by index so the merge order never depends on
/// scheduling.
fn run_indexed<T: Send, F: Fn(usize) -> T + Sync>(n_jobs: usize, f: F) -> Vec<T> {
    let threads = job_thread_cap().min(n_jobs.max(1));
    let slots: Vec<Mutex<Option<T>>> = (0..n_jobs).map(|_| Mutex::new(Option::None)).collect();
    let next = AtomicUsize::new(0);
    std::thread::scope(|scope| {
        for _ in 0..threads {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= n_jobs {
                    break;
                }
                let out = f(i);
                *slots[i].lock().unwrap() = Some(out);
            });
        }
    });
    slots
        .into_iter()
        .map(|m| m.into_inner().unwrap().expect("every job ran"))
        .collect()
}

/// Executes the full experiment: per seed, prepare the data and train the
/// base model; per (seed, method), fit the method, evaluate on the test
/// split in the original target scale, and attach the calibration p-value.
/// Stage errors are recorded per (seed, method) without aborting siblings.
pub fn run_pipeline(cfg: &RunConfig) -> Result<RunOutcome> {
    cfg.validate()?;
    let dataset_name = cfg.dataset.name();
    let model_label = cfg.model.label().to_string();

    // Phase A: one context per seed (data + base model), in parallel.
    let contexts: Vec<Result<SeedContext>> =
        run_indexed(cfg.seeds.len(), |i| build_seed_context(cfg, cfg.seeds[i]));

    // Null calibration-error distributions, one per distinct test size.
    let mut nulls: BTreeMap<usize, Arc<NullPceDistribution>> = BTreeMap::new();
    if cfg.null_sims > 0 {
        for ctx in contexts.iter().flatten() {
            let n = ctx.test_y.len();
            if let std::collections::btree_map::Entry::Vacant(slot) = nulls.entry(n) {
                let null = simulate_null_pce(n, DEFAULT_PCE_GRID, cfg.null_sims, NULL_SEED)?;
                slot.insert(Arc::new(null));
            }
        }
    }

    // Phase B: one job per (seed, method).
    let n_methods = cfg.methods.len();
    let results: Vec<std::result::Result<EvaluationReport, String>> =
        run_indexed(cfg.seeds.len() * n_methods, |job| {
            let (si, mi) = (job / n_methods, job % n_methods);
            let seed = cfg.seeds[si];
            let method = cfg.methods[mi];
            let ctx = match &contexts[si] {
                Ok(ctx) => ctx,
                Err(e) => return Err(format!("seed setup failed: {e}")),
            };
            let run = || -> Result<EvaluationReport> {
                let (preds, lambda) = method_predictions(cfg, ctx, seed, method)?;
                let mut report = evaluate(&preds, &ctx.test_y, &cfg.eval_options())?;
                report.dataset = dataset_name.clone();
                report.model = model_label.clone();
                report.method = method.label().to_string();
                report.seed = seed;
                report.lambda = lambda;
                report.pce_p_value = nulls
                    .get(&ctx.test_y.len())
                    .map(|null| null.p_value_upper(report.pce));
                Ok(report)
            };
            run().map_err(|e| e.to_string())
        });

    let mut reports = Vec::new();
    let mut failures = Vec::new();
    for (job, result) in results.into_iter().enumerate() {
        match result {
            Ok(report) => reports.push(report),
            Err(message) => failures.push(RunFailure {
                dataset: dataset_name.clone(),
                model: model_label.clone(),
                method: cfg.methods[job % n_methods].label().to_string(),
                seed: cfg.seeds[job / n_methods],
                message,
            }),
        }
    }
    Ok(RunOutcome { reports, failures })
}

/// [`run_pipeline`] followed by [`emit_report`] into the configured output
/// directory; failures additionally land in `failures.json`.
pub fn run_and_emit(cfg: &RunConfig) -> Result<(RunOutcome, Vec<PathBuf>)> {
    let outcome = run_pipeline(cfg)?;
    let mut files = Vec::new();
    if !outcome.reports.is_empty() {
        files = emit_report(&outcome.reports, &cfg.out, &cfg.formats)?;
    }
    if !outcome.failures.is_empty() {
        std::fs::create_dir_all(&cfg.out)?;
        let path = cfg.out.join("failures.json");
        let mut text = serde_json::to_string_pretty(&outcome.failures)?;
        text.push('\n');
        std::fs::write(&path, text)?;
        files.push(path);
    }
    Ok((outcome, files))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::report::write_reports_json;

    /// A deliberately tiny configuration so tests stay fast.
    fn tiny_config(model: ModelKind, methods: Vec<MethodKind>) -> RunConfig {
        RunConfig {
            dataset: DataSource::Synthetic {
                synthetic: SyntheticKind::SinusoidalHetero,
                n: 400,
            },
            model,
            methods,
            lambda_grid: vec![0.0],
            seeds: vec![0, 1],
            hidden_layers: 1,
            units: 8,
            dropout_rate: 0.0,
            mixture_components: 2,
            quantile_levels: 16,
            batch_size: 128,
            max_epochs: 3,
            patience: 3,
            band_sims: 1000,
            null_sims: 200,
            ..RunConfig::default()
        }
    }

    #[test]
    fn config_validation_rejects_bad_combinations() {
        let mut cfg = tiny_config(ModelKind::MixNll, vec![MethodKind::Cqr]);
        assert!(matches!(cfg.validate(), Err(Error::InvalidArgument(_))));
        cfg.model = ModelKind::SqrCrps;
        assert!(cfg.validate().is_ok());
        cfg.seeds = vec![3, 3];
        assert!(cfg.validate().is_err());
        cfg.seeds = vec![3];
        cfg.methods = vec![MethodKind::None, MethodKind::None];
        assert!(cfg.validate().is_err());
        cfg.methods = vec![MethodKind::None];
        cfg.lambda_grid = vec![-0.5];
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn pipeline_produces_one_report_per_seed_and_method() {
        let cfg = tiny_config(
            ModelKind::MixNll,
            vec![MethodKind::None, MethodKind::RecEmp, MethodKind::RecLin],
        );
        let outcome = run_pipeline(&cfg).unwrap();
        assert!(outcome.failures.is_empty(), "{:?}", outcome.failures);
        assert_eq!(outcome.reports.len(), 6);
        for r in &outcome.reports {
            assert_eq!(r.dataset, "sinusoidal-hetero");
            assert_eq!(r.model, "mix-nll");
            assert_eq!(r.n_test, 40);
            assert!(r.pce_p_value.is_some());
            assert!(r.reliability.band_low.is_some());
        }
    }

    #[test]
    fn identical_configs_produce_byte_identical_reports() {
        let cfg = tiny_config(
            ModelKind::MixCrps,
            vec![MethodKind::None, MethodKind::RecKde, MethodKind::Dcp],
        );
        let a = run_pipeline(&cfg).unwrap();
        let b = run_pipeline(&cfg).unwrap();
        let mut ja = Vec::new();
        let mut jb = Vec::new();
        write_reports_json(&a.reports, &mut ja).unwrap();
        write_reports_json(&b.reports, &mut jb).unwrap();
        assert_eq!(ja, jb);
    }

    #[test]
    fn rec_dcp_and_dcp_share_test_quantiles_exactly() {
        let cfg = tiny_config(ModelKind::MixNll, vec![MethodKind::None]);
        let ctx = build_seed_context(&cfg, 0).unwrap();
        let (rec, _) = method_predictions(&cfg, &ctx, 0, MethodKind::RecDcp).unwrap();
        let (dcp, _) = method_predictions(&cfg, &ctx, 0, MethodKind::Dcp).unwrap();
        for (a, b) in rec.iter().zip(&dcp) {
            for j in 1..100 {
                let alpha = j as f64 / 100.0;
                let qa = a.quantile(alpha).unwrap();
                let qb = b.quantile(alpha).unwrap();
                assert!(
                    qa == qb || (qa.is_infinite() && qb.is_infinite() && qa == qb),
                    "alpha {alpha}: {qa} vs {qb}"
                );
            }
        }
    }

    #[test]
    fn zero_only_lambda_grid_reproduces_the_base_report() {
        let mut cfg = tiny_config(ModelKind::MixNll, vec![MethodKind::None, MethodKind::Qr]);
        cfg.seeds = vec![0];
        let outcome = run_pipeline(&cfg).unwrap();
        assert!(outcome.failures.is_empty(), "{:?}", outcome.failures);
        let base = &outcome.reports[0];
        let reg = &outcome.reports[1];
        assert_eq!(base.method, "none");
        assert_eq!(reg.method, "qr");
        assert_eq!(reg.lambda, Some(0.0));
        assert_eq!(base.pce, reg.pce);
        assert_eq!(base.crps, reg.crps);
        assert_eq!(base.nll, reg.nll);
        assert_eq!(base.reliability, reg.reliability);
    }

    #[test]
    fn regularized_method_selects_within_the_grid() {
        let mut cfg = tiny_config(ModelKind::MixNll, vec![MethodKind::PceSort]);
        cfg.seeds = vec![0];
        cfg.lambda_grid = vec![0.0, 0.1];
        let outcome = run_pipeline(&cfg).unwrap();
        assert!(outcome.failures.is_empty(), "{:?}", outcome.failures);
        let lambda = outcome.reports[0].lambda.unwrap();
        assert!(lambda == 0.0 || lambda == 0.1);
    }

    #[test]
    fn failures_are_recorded_per_seed_and_method() {
        let cfg = RunConfig {
            dataset: DataSource::Csv {
                path: PathBuf::from("/nonexistent/data.csv"),
                target: "y".into(),
            },
            ..tiny_config(ModelKind::MixNll, vec![MethodKind::None, MethodKind::RecEmp])
        };
        let outcome = run_pipeline(&cfg).unwrap();
        assert!(outcome.reports.is_empty());
        assert_eq!(outcome.failures.len(), 4); // 2 seeds x 2 methods
        assert!(outcome.failures[0].message.contains("seed setup failed"));
    }

    #[test]
    fn posthoc_source_changes_maps_but_not_the_base_method() {
        let mut calib_cfg = tiny_config(
            ModelKind::MixNll,
            vec![MethodKind::None, MethodKind::RecEmp],
        );
        calib_cfg.seeds = vec![0];
        let mut train_cfg = calib_cfg.clone();
        train_cfg.posthoc_source = PosthocSource::Train;
        let from_calib = run_pipeline(&calib_cfg).unwrap();
        let from_train = run_pipeline(&train_cfg).unwrap();
        // The base method never touches the post-hoc split.
        assert_eq!(from_calib.reports[0].crps, from_train.reports[0].crps);
        assert_eq!(from_calib.reports[0].pce, from_train.reports[0].pce);
        // The recalibrated method does.
        assert_ne!(from_calib.reports[1].pce, from_train.reports[1].pce);
    }

    #[test]
    fn quantile_model_reports_have_no_nll() {
        let cfg = RunConfig {
            seeds: vec![0],
            ..tiny_config(ModelKind::SqrCrps, vec![MethodKind::None, MethodKind::Cqr])
        };
        let outcome = run_pipeline(&cfg).unwrap();
        assert!(outcome.failures.is_empty(), "{:?}", outcome.failures);
        for r in &outcome.reports {
            assert_eq!(r.nll, Option::None);
            assert!(r.crps.is_finite());
        }
    }

    #[test]
    fn run_and_emit_writes_the_requested_files() {
        let dir = std::env::temp_dir().join(format!("calibreg-pipe-{}", std::process::id()));
        let cfg = RunConfig {
            seeds: vec![0],
            out: dir.clone(),
            formats: vec![ReportFormat::Json, ReportFormat::Csv],
            ..tiny_config(ModelKind::MixNll, vec![MethodKind::None])
        };
        let (outcome, files) = run_and_emit(&cfg).unwrap();
        assert_eq!(outcome.reports.len(), 1);
        assert_eq!(files.len(), 2);
        assert!(dir.join("reports.json").exists());
        assert!(dir.join("metrics.csv").exists());
        std::fs::remove_dir_all(&dir).unwrap();
    }
}
