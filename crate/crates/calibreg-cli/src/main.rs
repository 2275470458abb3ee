//! Command-line entry point for the calibration toolkit.
//!
//! Subcommands cover the full workflow: `prepare` a dataset, `train` a base
//! model, `recalibrate` / `conformalize` it post hoc, `evaluate` whole
//! method grids, run a `null-test` for a single calibration error, `compare`
//! methods across datasets, and re-`report` stored results. `evaluate` also
//! accepts a TOML config file mirroring the run configuration.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use calibreg::data::{prepare_dataset, MIN_ROWS};
use calibreg::metrics::{EvaluationReport, DEFAULT_PCE_GRID};
use calibreg::pipeline::{
    run_and_emit, DataSource, MethodKind, ModelKind, PosthocSource, RunConfig, SyntheticKind,
};
use calibreg::report::{emit_report, ReportFormat};
use calibreg::stats::{
    cd_ranking, friedman_test, simulate_null_pce, ComparisonMatrix, DEFAULT_NULL_SIMS,
};
use calibreg::train::{train, NetworkConfig, TrainConfig};

#[derive(Parser)]
#[command(
    name = "calibreg",
    version,
    about = "Probabilistic-calibration toolkit for regression"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Load, split, and normalize a dataset; print a split summary.
    Prepare {
        #[command(flatten)]
        data: DataArgs,
        /// Shuffle / split seed.
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train a base model; write model parameters and the training log.
    Train {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, value_enum, default_value_t = ModelArg::MixNll)]
        model: ModelArg,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[command(flatten)]
        knobs: TrainKnobs,
        /// Output directory for model.json and training_log.csv.
        #[arg(long, default_value = "calibreg-out")]
        out: PathBuf,
    },
    /// Apply a post-hoc recalibration map and evaluate on the test split.
    Recalibrate {
        #[command(flatten)]
        run: RunArgs,
        /// Recalibration method.
        #[arg(long, value_enum, default_value_t = MethodArg::RecEmp)]
        method: MethodArg,
    },
    /// Apply conformal prediction and evaluate on the test split.
    Conformalize {
        #[command(flatten)]
        run: RunArgs,
        /// Conformal method.
        #[arg(long, value_enum, default_value_t = MethodArg::Dcp)]
        method: MethodArg,
    },
    /// Run a full method-comparison experiment (flags or a TOML config).
    Evaluate {
        /// TOML config file mirroring the run configuration; exclusive with
        /// the other flags.
        #[arg(long)]
        config: Option<PathBuf>,
        #[command(flatten)]
        run: RunArgs,
        /// Methods to compare.
        #[arg(long = "method", value_enum, value_delimiter = ',', num_args = 1..)]
        methods: Vec<MethodArg>,
    },
    /// Simulate the null distribution of the calibration error.
    NullTest {
        /// PIT sample size of each replication.
        #[arg(long)]
        n: usize,
        /// Level-grid size of the calibration error.
        #[arg(long, default_value_t = DEFAULT_PCE_GRID)]
        grid_size: usize,
        /// Number of replications.
        #[arg(long, default_value_t = DEFAULT_NULL_SIMS)]
        sims: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Observed calibration error; prints its upper-tail p-value.
        #[arg(long)]
        observed: Option<f64>,
    },
    /// Rank methods across datasets from a long-format metrics CSV.
    Compare {
        /// metrics.csv produced by `evaluate` (or any long-format CSV).
        #[arg(long)]
        input: PathBuf,
        /// Metric column value to compare on.
        #[arg(long, default_value = "crps")]
        metric: String,
        /// Significance level of the pairwise tests.
        #[arg(long, default_value_t = 0.05)]
        alpha: f64,
    },
    /// Re-emit CSV/SVG artifacts from a stored reports.json.
    Report {
        /// reports.json produced by `evaluate`.
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value = "calibreg-out")]
        out: PathBuf,
        #[arg(long = "format", value_enum, value_delimiter = ',', num_args = 1..,
              default_values_t = [FormatArg::Json, FormatArg::Csv, FormatArg::Svg])]
        formats: Vec<FormatArg>,
    },
}

/// Dataset selection: a CSV path or a built-in synthetic generator name.
#[derive(Args)]
struct DataArgs {
    /// CSV file path, or a synthetic generator: linear-gaussian,
    /// sinusoidal-hetero, heavy-tailed.
    #[arg(long)]
    dataset: String,
    /// Target column (CSV datasets only).
    #[arg(long, default_value = "y")]
    target: String,
    /// Rows drawn from a synthetic generator.
    #[arg(long, default_value_t = 2000)]
    rows: usize,
}

impl DataArgs {
    fn source(&self) -> Result<DataSource> {
        let synthetic = match self.dataset.as_str() {
            "linear-gaussian" => Some(SyntheticKind::LinearGaussian),
            "sinusoidal-hetero" => Some(SyntheticKind::SinusoidalHetero),
            "heavy-tailed" => Some(SyntheticKind::HeavyTailed),
            _ => None,
        };
        Ok(match synthetic {
            Some(kind) => {
                if self.rows < MIN_ROWS {
                    bail!("synthetic datasets need at least {MIN_ROWS} rows");
                }
                DataSource::Synthetic {
                    synthetic: kind,
                    n: self.rows,
                }
            }
            None => DataSource::Csv {
                path: PathBuf::from(&self.dataset),
                target: self.target.clone(),
            },
        })
    }
}

/// Network and optimizer settings shared by the training subcommands.
#[derive(Args)]
struct TrainKnobs {
    #[arg(long, default_value_t = 3)]
    hidden_layers: usize,
    #[arg(long, default_value_t = 100)]
    units: usize,
    #[arg(long, default_value_t = 0.2)]
    dropout_rate: f64,
    /// Components of the Gaussian-mixture head.
    #[arg(long, default_value_t = 3)]
    mixture_components: usize,
    /// Levels of the quantile-grid head.
    #[arg(long, default_value_t = 64)]
    quantile_levels: usize,
    #[arg(long, default_value_t = 512)]
    batch_size: usize,
    #[arg(long, default_value_t = 1e-3)]
    learning_rate: f64,
    #[arg(long, default_value_t = 1000)]
    max_epochs: usize,
    #[arg(long, default_value_t = 30)]
    patience: usize,
}

/// Flags shared by every pipeline-running subcommand.
#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, value_enum, default_value_t = ModelArg::MixNll)]
    model: ModelArg,
    /// Regularization strengths tried by regularized methods.
    #[arg(long = "lambda-grid", value_delimiter = ',', num_args = 1.., default_values_t = [0.0])]
    lambda_grid: Vec<f64>,
    /// Run seeds (one full split + training per seed).
    #[arg(long = "seeds", value_delimiter = ',', num_args = 1.., default_values_t = [0, 1, 2, 3, 4])]
    seeds: Vec<u64>,
    /// Split post-hoc maps and conformity scores are fitted on.
    #[arg(long, value_enum, default_value_t = PosthocArg::Calib)]
    posthoc_source: PosthocArg,
    #[arg(long, default_value = "calibreg-out")]
    out: PathBuf,
    #[arg(long = "format", value_enum, value_delimiter = ',', num_args = 1..,
          default_values_t = [FormatArg::Json, FormatArg::Csv, FormatArg::Svg])]
    formats: Vec<FormatArg>,
    #[command(flatten)]
    knobs: TrainKnobs,
    /// Replications behind the reliability consistency band.
    #[arg(long, default_value_t = 1000)]
    band_sims: usize,
    /// Simulations behind calibration p-values (0 disables them).
    #[arg(long, default_value_t = DEFAULT_NULL_SIMS)]
    null_sims: usize,
}

impl RunArgs {
    fn config(&self, methods: Vec<MethodKind>) -> Result<RunConfig> {
        Ok(RunConfig {
            dataset: self.data.source()?,
            model: self.model.into(),
            methods,
            lambda_grid: self.lambda_grid.clone(),
            posthoc_source: self.posthoc_source.into(),
            seeds: self.seeds.clone(),
            out: self.out.clone(),
            formats: self.formats.iter().map(|&f| f.into()).collect(),
            hidden_layers: self.knobs.hidden_layers,
            units: self.knobs.units,
            dropout_rate: self.knobs.dropout_rate,
            mixture_components: self.knobs.mixture_components,
            quantile_levels: self.knobs.quantile_levels,
            batch_size: self.knobs.batch_size,
            learning_rate: self.knobs.learning_rate,
            max_epochs: self.knobs.max_epochs,
            patience: self.knobs.patience,
            band_sims: self.band_sims,
            null_sims: self.null_sims,
            ..RunConfig::default()
        })
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ModelArg {
    MixNll,
    MixCrps,
    SqrCrps,
}

impl From<ModelArg> for ModelKind {
    fn from(m: ModelArg) -> Self {
        match m {
            ModelArg::MixNll => ModelKind::MixNll,
            ModelArg::MixCrps => ModelKind::MixCrps,
            ModelArg::SqrCrps => ModelKind::SqrCrps,
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum MethodArg {
    None,
    RecEmp,
    RecLin,
    RecKde,
    RecDcp,
    Cqr,
    Dcp,
    Qr,
    Trunc,
    PceKde,
    PceSort,
}

impl From<MethodArg> for MethodKind {
    fn from(m: MethodArg) -> Self {
        match m {
            MethodArg::None => MethodKind::None,
            MethodArg::RecEmp => MethodKind::RecEmp,
            MethodArg::RecLin => MethodKind::RecLin,
            MethodArg::RecKde => MethodKind::RecKde,
            MethodArg::RecDcp => MethodKind::RecDcp,
            MethodArg::Cqr => MethodKind::Cqr,
            MethodArg::Dcp => MethodKind::Dcp,
            MethodArg::Qr => MethodKind::Qr,
            MethodArg::Trunc => MethodKind::Trunc,
            MethodArg::PceKde => MethodKind::PceKde,
            MethodArg::PceSort => MethodKind::PceSort,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum PosthocArg {
    Calib,
    Train,
}

impl From<PosthocArg> for PosthocSource {
    fn from(p: PosthocArg) -> Self {
        match p {
            PosthocArg::Calib => PosthocSource::Calib,
            PosthocArg::Train => PosthocSource::Train,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum FormatArg {
    Json,
    Csv,
    Svg,
}

impl From<FormatArg> for ReportFormat {
    fn from(f: FormatArg) -> Self {
        match f {
            FormatArg::Json => ReportFormat::Json,
            FormatArg::Csv => ReportFormat::Csv,
            FormatArg::Svg => ReportFormat::Svg,
        }
    }
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Prepare { data, seed } => prepare_cmd(&data, seed),
        Command::Train {
            data,
            model,
            seed,
            knobs,
            out,
        } => train_cmd(&data, model, seed, &knobs, &out),
        Command::Recalibrate { run, method } => {
            if !matches!(
                method,
                MethodArg::RecEmp | MethodArg::RecLin | MethodArg::RecKde | MethodArg::RecDcp
            ) {
                bail!("recalibrate accepts rec-emp, rec-lin, rec-kde, or rec-dcp");
            }
            run_cmd(&run, vec![method.into()])
        }
        Command::Conformalize { run, method } => {
            if !matches!(method, MethodArg::Cqr | MethodArg::Dcp) {
                bail!("conformalize accepts cqr or dcp");
            }
            run_cmd(&run, vec![method.into()])
        }
        Command::Evaluate {
            config,
            run,
            methods,
        } => match config {
            Some(path) => {
                let text = fs::read_to_string(&path)
                    .with_context(|| format!("reading config {}", path.display()))?;
                let cfg: RunConfig = toml::from_str(&text)
                    .with_context(|| format!("parsing config {}", path.display()))?;
                execute(&cfg)
            }
            None => {
                if methods.is_empty() {
                    bail!("evaluate needs --method (or --config)");
                }
                run_cmd(&run, methods.into_iter().map(Into::into).collect())
            }
        },
        Command::NullTest {
            n,
            grid_size,
            sims,
            seed,
            observed,
        } => null_test_cmd(n, grid_size, sims, seed, observed),
        Command::Compare {
            input,
            metric,
            alpha,
        } => compare_cmd(&input, &metric, alpha),
        Command::Report {
            input,
            out,
            formats,
        } => report_cmd(&input, &out, &formats),
    }
}

fn prepare_cmd(data: &DataArgs, seed: u64) -> Result<()> {
    let ds = match data.source()? {
        DataSource::Csv { path, target } => prepare_dataset(&path, &target, seed)?,
        DataSource::Synthetic { synthetic, n } => {
            let (x, y) = synthetic.generate(n, seed);
            calibreg::data::SplitDataset::from_arrays(&x, &y, seed)?
        }
    };
    println!(
        "{}",
        serde_json::to_string_pretty(&serde_json::json!({
            "splits": {
                "train": ds.train_y.len(),
                "val": ds.val_y.len(),
                "cal": ds.cal_y.len(),
                "test": ds.test_y.len(),
            },
            "n_features": ds.n_features(),
            "feature_names": ds.feature_names,
            "target_mean": ds.target_mean,
            "target_std": ds.target_std,
        }))?
    );
    Ok(())
}

fn train_cmd(
    data: &DataArgs,
    model: ModelArg,
    seed: u64,
    knobs: &TrainKnobs,
    out: &Path,
) -> Result<()> {
    let model: ModelKind = model.into();
    let cfg = RunConfig {
        dataset: data.source()?,
        model,
        hidden_layers: knobs.hidden_layers,
        units: knobs.units,
        dropout_rate: knobs.dropout_rate,
        mixture_components: knobs.mixture_components,
        quantile_levels: knobs.quantile_levels,
        batch_size: knobs.batch_size,
        learning_rate: knobs.learning_rate,
        max_epochs: knobs.max_epochs,
        patience: knobs.patience,
        ..RunConfig::default()
    };
    let ds = match &cfg.dataset {
        DataSource::Csv { path, target } => prepare_dataset(path, target, seed)?,
        DataSource::Synthetic { synthetic, n } => {
            let (x, y) = synthetic.generate(*n, seed);
            calibreg::data::SplitDataset::from_arrays(&x, &y, seed)?
        }
    };
    let net = NetworkConfig {
        hidden_layers: cfg.hidden_layers,
        units: cfg.units,
        dropout_rate: cfg.dropout_rate,
        head: match model {
            ModelKind::SqrCrps => calibreg::train::Head::Quantile {
                m: cfg.quantile_levels,
            },
            _ => calibreg::train::Head::Mixture {
                k: cfg.mixture_components,
            },
        },
        seed,
    };
    let train_cfg = TrainConfig {
        base_loss: match model {
            ModelKind::MixNll => calibreg::train::BaseLoss::Nll,
            ModelKind::MixCrps => calibreg::train::BaseLoss::Crps,
            ModelKind::SqrCrps => calibreg::train::BaseLoss::PinballGrid,
        },
        batch_size: cfg.batch_size,
        learning_rate: cfg.learning_rate,
        max_epochs: cfg.max_epochs,
        patience: cfg.patience,
        ..TrainConfig::default()
    };
    let fitted = train(&net, &train_cfg, &ds.train_x, &ds.train_y, &ds.val_x, &ds.val_y)?;
    fs::create_dir_all(out)?;
    fs::write(out.join("model.json"), fitted.to_json()?)?;
    fitted.write_log_csv(fs::File::create(out.join("training_log.csv"))?)?;
    let best = fitted
        .log()
        .iter()
        .map(|e| e.val_loss)
        .fold(f64::INFINITY, f64::min);
    println!(
        "{}",
        serde_json::to_string_pretty(&serde_json::json!({
            "model": model.label(),
            "epochs": fitted.log().len(),
            "best_val_loss": best,
            "files": [out.join("model.json"), out.join("training_log.csv")],
        }))?
    );
    Ok(())
}

fn run_cmd(run: &RunArgs, methods: Vec<MethodKind>) -> Result<()> {
    execute(&run.config(methods)?)
}

/// Runs a configured experiment and prints a summary of what was written.
fn execute(cfg: &RunConfig) -> Result<()> {
    let (outcome, files) = run_and_emit(cfg)?;
    println!(
        "{}",
        serde_json::to_string_pretty(&serde_json::json!({
            "reports": outcome.reports.len(),
            "failures": outcome.failures.len(),
            "files": files,
        }))?
    );
    if outcome.reports.is_empty() && !outcome.failures.is_empty() {
        bail!(
            "all {} runs failed; first: {}",
            outcome.failures.len(),
            outcome.failures[0].message
        );
    }
    Ok(())
}

fn null_test_cmd(
    n: usize,
    grid_size: usize,
    sims: usize,
    seed: u64,
    observed: Option<f64>,
) -> Result<()> {
    let null = simulate_null_pce(n, grid_size, sims, seed)?;
    let mut sorted = null.samples.clone();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let q = |p: f64| calibreg::num::quantile_type7(&sorted, p);
    let mut summary = serde_json::json!({
        "n": n,
        "grid_size": grid_size,
        "sims": sims,
        "null_quantiles": {
            "q50": q(0.50),
            "q90": q(0.90),
            "q95": q(0.95),
            "q99": q(0.99),
        },
    });
    if let Some(obs) = observed {
        summary["observed"] = serde_json::json!(obs);
        summary["p_value"] = serde_json::json!(null.p_value_upper(obs));
    }
    println!("{}", serde_json::to_string_pretty(&summary)?);
    Ok(())
}

fn compare_cmd(input: &Path, metric: &str, alpha: f64) -> Result<()> {
    let file = fs::File::open(input)
        .with_context(|| format!("opening metrics CSV {}", input.display()))?;
    let matrix = ComparisonMatrix::from_csv(file, metric)?;
    // Friedman needs >= 2 datasets; on a single-dataset table report null.
    let friedman = friedman_test(&matrix)
        .ok()
        .map(|(statistic, p_value)| serde_json::json!({ "statistic": statistic, "p_value": p_value }));
    let ranking = cd_ranking(&matrix, alpha)?;
    println!(
        "{}",
        serde_json::to_string_pretty(&serde_json::json!({
            "metric": metric,
            "datasets": matrix.datasets().len(),
            "friedman": friedman,
            "ranking": ranking,
        }))?
    );
    Ok(())
}

fn report_cmd(input: &Path, out: &Path, formats: &[FormatArg]) -> Result<()> {
    let text = fs::read_to_string(input)
        .with_context(|| format!("reading reports {}", input.display()))?;
    let reports: Vec<EvaluationReport> = serde_json::from_str(&text)?;
    let formats: Vec<ReportFormat> = formats.iter().map(|&f| f.into()).collect();
    let files = emit_report(&reports, out, &formats)?;
    println!(
        "{}",
        serde_json::to_string_pretty(&serde_json::json!({
            "reports": reports.len(),
            "files": files,
        }))?
    );
    Ok(())
}
