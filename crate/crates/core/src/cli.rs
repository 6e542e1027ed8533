//! Command-line front end.
//!
//! Every run writes `manifest.json` next to its results. The manifest holds
//! the fully resolved configuration, so repeating the listed arguments
//! reproduces the outputs exactly.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::dataset::{load_csv, CapacitySeries, Fleet, Schema};
use crate::error::{Error, Result};
use crate::gp::GpModel;
use crate::kernels::{Kernel, LabeledInput};
use crate::meanfn::MeanKind;
use crate::optimize::{candidate_kernels, kernel_search, train, RestartDiagnostics, TrainConfig};
use crate::prognostics::{
    eol_grid, evaluate, forecast_eol, lookahead, ArForecaster, EvaluationReport, Forecaster, GpForecaster,
    MogpForecaster, SweepConfig,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "gpprog", version, about = "Gaussian-process capacity forecasting for battery cells")]
struct Cli {
    #[command(subcommand)]
    command: CliCommand,
}

#[derive(Debug, Subcommand)]
enum CliCommand {
    /// Train one model and write its posterior and additive components.
    Fit(FitArgs),
    /// Rank all pairwise sums of the base kernels by marginal likelihood.
    KernelSearch(SearchArgs),
    /// Forecast the end-of-life cycle from a training prefix.
    Forecast(ForecastArgs),
    /// n-step-ahead errors over all rolling origins.
    Lookahead(LookaheadArgs),
    /// Rolling-origin evaluation of capacity and EoL forecasts.
    Evaluate(EvaluateArgs),
    /// Rolling-origin evaluation of a multi-output model.
    MogpEvaluate(MogpArgs),
}

#[derive(Debug, Args)]
struct Common {
    /// Capacity CSV with a header row.
    #[arg(long)]
    data: PathBuf,
    /// Column overrides, e.g. `cycle=day,capacity=cap_ah`.
    #[arg(long)]
    schema: Option<String>,
    /// Cell to model; may be omitted when the file holds a single cell.
    #[arg(long)]
    target: Option<String>,
    #[arg(long, default_value_t = 10)]
    restarts: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Worker threads; 0 uses every core.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    #[arg(long, env = "GPPROG_OUT", default_value = "out")]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct ModelArgs {
    /// Kernel expression such as `MA5+MA3`, or `AR<p>` for the autoregressive baseline.
    #[arg(long, default_value = "MA5+MA3")]
    kernel: String,
    #[arg(long, default_value = "CONST")]
    mean: String,
}

#[derive(Debug, Args)]
struct FitArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, default_value = "MA5+MA3")]
    kernel: String,
    #[arg(long, default_value = "CONST")]
    mean: String,
    /// Fraction of the series used for training.
    #[arg(long, default_value_t = 1.0)]
    start: f64,
}

#[derive(Debug, Args)]
struct SearchArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, value_delimiter = ',', default_value = "SE,PER,MA3,MA5")]
    bases: Vec<String>,
    #[arg(long, default_value = "CONST")]
    mean: String,
}

#[derive(Debug, Args)]
struct ForecastArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    model: ModelArgs,
    /// Fraction of the series used as history.
    #[arg(long, default_value_t = 1.0)]
    start: f64,
    #[arg(long, default_value_t = 0.7)]
    eol: f64,
    /// Auxiliary cells for a multi-output forecast.
    #[arg(long, value_delimiter = ',')]
    train_cells: Vec<String>,
}

#[derive(Debug, Args)]
struct SweepArgs {
    #[arg(long, default_value_t = 0.2)]
    start: f64,
    #[arg(long)]
    warm_start: bool,
}

#[derive(Debug, Args)]
struct LookaheadArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    sweep: SweepArgs,
    #[arg(long, value_delimiter = ',', default_value = "5,10,20,40")]
    horizons: Vec<usize>,
}

#[derive(Debug, Args)]
struct EvaluateArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    sweep: SweepArgs,
    #[arg(long, default_value_t = 0.7)]
    eol: f64,
    /// Lookahead horizons evaluated from the same fits.
    #[arg(long, value_delimiter = ',')]
    horizons: Vec<usize>,
}

#[derive(Debug, Args)]
struct MogpArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    sweep: SweepArgs,
    #[arg(long, default_value_t = 0.7)]
    eol: f64,
    #[arg(long, value_delimiter = ',', required = true)]
    train_cells: Vec<String>,
    #[arg(long, value_delimiter = ',')]
    horizons: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    Fit,
    KernelSearch,
    Forecast,
    Lookahead,
    Evaluate,
    MogpEvaluate,
}

/// Fully resolved settings of one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub command: Command,
    pub data: PathBuf,
    pub schema: Schema,
    pub target: Option<String>,
    pub kernel: String,
    pub mean: MeanKind,
    pub bases: Vec<String>,
    pub train_cells: Vec<String>,
    pub start: f64,
    pub eol: f64,
    pub horizons: Vec<usize>,
    pub warm_start: bool,
    pub train: TrainConfig,
    pub jobs: usize,
    pub out: PathBuf,
}

impl RunConfig {
    pub fn seed(&self) -> u64 {
        self.train.seed
    }
}

/// Invalid command line. `flag` names the offending option when known.
#[derive(Debug)]
pub struct UsageError {
    pub flag: Option<String>,
    pub message: String,
}

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match &self.flag {
            Some(flag) => write!(f, "invalid value for --{flag}: {}", self.message),
            None => f.write_str(&self.message),
        }
    }
}

impl std::error::Error for UsageError {}

fn usage(flag: &str, message: impl Into<String>) -> UsageError {
    UsageError { flag: Some(flag.into()), message: message.into() }
}

/// Model chosen by `--kernel`.
enum ModelChoice {
    Gp(Kernel),
    Ar(usize),
}

fn parse_model(expr: &str) -> std::result::Result<ModelChoice, UsageError> {
    if let Some(order) = expr.strip_prefix("AR") {
        let order = order.trim_start_matches('(').trim_end_matches(')');
        return match order.parse::<usize>() {
            Ok(p) if p > 0 => Ok(ModelChoice::Ar(p)),
            _ => Err(usage("kernel", format!("`{expr}` is not a valid autoregressive order"))),
        };
    }
    expr.parse::<Kernel>().map(ModelChoice::Gp).map_err(|e| usage("kernel", e.to_string()))
}

fn fraction(flag: &str, v: f64, allow_one: bool) -> std::result::Result<f64, UsageError> {
    let ok = v > 0.0 && (v < 1.0 || (allow_one && v == 1.0));
    if ok {
        Ok(v)
    } else {
        let range = if allow_one { "(0, 1]" } else { "(0, 1)" };
        Err(usage(flag, format!("{v} is not in {range}")))
    }
}

fn distinct_cells(flag: &str, cells: &[String]) -> std::result::Result<Vec<String>, UsageError> {
    let mut out: Vec<String> = Vec::new();
    for c in cells.iter().map(|c| c.trim()).filter(|c| !c.is_empty()) {
        if out.iter().any(|o| o == c) {
            return Err(usage(flag, format!("cell `{c}` listed twice")));
        }
        out.push(c.to_string());
    }
    Ok(out)
}

/// Parses and validates a command line (`argv[0]` included). Help and
/// version requests come back as [`ParseFailure::Clap`] with exit code 0.
pub fn parse_args<I, T>(argv: I) -> std::result::Result<RunConfig, ParseFailure>
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = Cli::try_parse_from(argv).map_err(ParseFailure::Clap)?;
    resolve(cli).map_err(ParseFailure::Usage)
}

#[derive(Debug)]
pub enum ParseFailure {
    Clap(clap::Error),
    Usage(UsageError),
}

impl ParseFailure {
    pub fn exit_code(&self) -> i32 {
        match self {
            ParseFailure::Clap(e) if !e.use_stderr() => EXIT_OK,
            _ => EXIT_USAGE,
        }
    }
}

fn resolve(cli: Cli) -> std::result::Result<RunConfig, UsageError> {
    let (command, common) = match &cli.command {
        CliCommand::Fit(a) => (Command::Fit, &a.common),
        CliCommand::KernelSearch(a) => (Command::KernelSearch, &a.common),
        CliCommand::Forecast(a) => (Command::Forecast, &a.common),
        CliCommand::Lookahead(a) => (Command::Lookahead, &a.common),
        CliCommand::Evaluate(a) => (Command::Evaluate, &a.common),
        CliCommand::MogpEvaluate(a) => (Command::MogpEvaluate, &a.common),
    };
    if !common.data.is_file() {
        return Err(usage("data", format!("`{}` is not a readable file", common.data.display())));
    }
    let schema = match &common.schema {
        Some(s) => Schema::parse(s).map_err(|e| usage("schema", e.to_string()))?,
        None => Schema::default(),
    };
    if common.restarts == 0 {
        return Err(usage("restarts", "at least one restart is required"));
    }
    let mut config = RunConfig {
        command,
        data: common.data.clone(),
        schema,
        target: common.target.clone(),
        kernel: String::new(),
        mean: MeanKind::Const,
        bases: Vec::new(),
        train_cells: Vec::new(),
        start: 1.0,
        eol: 0.7,
        horizons: Vec::new(),
        warm_start: false,
        train: TrainConfig { n_restarts: common.restarts, seed: common.seed, ..TrainConfig::default() },
        jobs: common.jobs,
        out: common.out.clone(),
    };
    let mean = |s: &str| s.parse::<MeanKind>().map_err(|e| usage("mean", e.to_string()));
    let eol = |v: f64| fraction("eol", v, false);
    match cli.command {
        CliCommand::Fit(a) => {
            parse_model(&a.kernel).and_then(|m| match m {
                ModelChoice::Gp(_) => Ok(()),
                ModelChoice::Ar(_) => Err(usage("kernel", "fit needs a kernel expression")),
            })?;
            config.kernel = a.kernel;
            config.mean = mean(&a.mean)?;
            config.start = fraction("start", a.start, true)?;
        }
        CliCommand::KernelSearch(a) => {
            let bases = a
                .bases
                .iter()
                .map(|b| b.trim().parse::<Kernel>().map_err(|e| usage("bases", e.to_string())))
                .collect::<std::result::Result<Vec<_>, _>>()?;
            if bases.is_empty() {
                return Err(usage("bases", "no base kernels given"));
            }
            config.bases = bases.iter().map(|b| b.to_string()).collect();
            config.mean = mean(&a.mean)?;
        }
        CliCommand::Forecast(a) => {
            let model = parse_model(&a.model.kernel)?;
            config.train_cells = distinct_cells("train-cells", &a.train_cells)?;
            if matches!(model, ModelChoice::Ar(_)) && !config.train_cells.is_empty() {
                return Err(usage("train-cells", "the autoregressive baseline is single-output"));
            }
            config.kernel = a.model.kernel;
            config.mean = mean(&a.model.mean)?;
            config.start = fraction("start", a.start, true)?;
            config.eol = eol(a.eol)?;
        }
        CliCommand::Lookahead(a) => {
            parse_model(&a.model.kernel)?;
            config.kernel = a.model.kernel;
            config.mean = mean(&a.model.mean)?;
            config.start = fraction("start", a.sweep.start, false)?;
            config.warm_start = a.sweep.warm_start;
            config.horizons = horizons(a.horizons, true)?;
        }
        CliCommand::Evaluate(a) => {
            parse_model(&a.model.kernel)?;
            config.kernel = a.model.kernel;
            config.mean = mean(&a.model.mean)?;
            config.start = fraction("start", a.sweep.start, false)?;
            config.warm_start = a.sweep.warm_start;
            config.eol = eol(a.eol)?;
            config.horizons = horizons(a.horizons, false)?;
        }
        CliCommand::MogpEvaluate(a) => {
            if let ModelChoice::Ar(_) = parse_model(&a.model.kernel)? {
                return Err(usage("kernel", "a multi-output model needs a kernel expression"));
            }
            config.kernel = a.model.kernel;
            config.mean = mean(&a.model.mean)?;
            config.start = fraction("start", a.sweep.start, false)?;
            config.warm_start = a.sweep.warm_start;
            config.eol = eol(a.eol)?;
            config.train_cells = distinct_cells("train-cells", &a.train_cells)?;
            if config.train_cells.is_empty() {
                return Err(usage("train-cells", "at least one auxiliary cell is required"));
            }
            if config.target.is_none() {
                return Err(usage("target", "mogp-evaluate needs the target cell"));
            }
            config.horizons = horizons(a.horizons, false)?;
        }
    }
    Ok(config)
}

fn horizons(mut hs: Vec<usize>, required: bool) -> std::result::Result<Vec<usize>, UsageError> {
    if hs.contains(&0) {
        return Err(usage("horizons", "horizons start at 1"));
    }
    if required && hs.is_empty() {
        return Err(usage("horizons", "no horizons given"));
    }
    hs.sort_unstable();
    hs.dedup();
    Ok(hs)
}

#[derive(Serialize)]
struct Manifest<'a> {
    program: &'static str,
    version: &'static str,
    seed: u64,
    config: &'a RunConfig,
    /// Arguments that repeat this run.
    args: Vec<String>,
    outputs: Vec<String>,
}

impl RunConfig {
    /// Command line equivalent to this configuration.
    pub fn to_args(&self) -> Vec<String> {
        let cmd = serde_json::to_value(self.command).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default();
        let mut a = vec![cmd, "--data".into(), self.data.display().to_string()];
        let s = &self.schema;
        a.extend(["--schema".into(), format!("cell_id={},cycle={},capacity={}", s.cell_id, s.cycle, s.capacity)]);
        if let Some(t) = &self.target {
            a.extend(["--target".into(), t.clone()]);
        }
        a.extend(["--restarts".into(), self.train.n_restarts.to_string()]);
        a.extend(["--seed".into(), self.train.seed.to_string()]);
        a.extend(["--jobs".into(), self.jobs.to_string()]);
        a.extend(["--out".into(), self.out.display().to_string()]);
        let join = |v: &[String]| v.join(",");
        let join_n = |v: &[usize]| v.iter().map(usize::to_string).collect::<Vec<_>>().join(",");
        match self.command {
            Command::KernelSearch => {
                a.extend(["--bases".into(), join(&self.bases), "--mean".into(), self.mean.to_string()]);
            }
            _ => {
                a.extend(["--kernel".into(), self.kernel.clone(), "--mean".into(), self.mean.to_string()]);
                a.extend(["--start".into(), self.start.to_string()]);
            }
        }
        if matches!(self.command, Command::Forecast | Command::Evaluate | Command::MogpEvaluate) {
            a.extend(["--eol".into(), self.eol.to_string()]);
        }
        if !self.train_cells.is_empty() {
            a.extend(["--train-cells".into(), join(&self.train_cells)]);
        }
        if !self.horizons.is_empty() {
            a.extend(["--horizons".into(), join_n(&self.horizons)]);
        }
        if self.warm_start {
            a.push("--warm-start".into());
        }
        a
    }
}

fn target_series<'a>(fleet: &'a Fleet, target: Option<&str>) -> Result<&'a CapacitySeries> {
    match target {
        Some(id) => fleet.get(id).ok_or_else(|| Error::Config(format!("cell `{id}` not found in the data"))),
        None if fleet.len() == 1 => Ok(&fleet.series()[0]),
        None => Err(Error::Config(format!("data holds {} cells; choose one with --target", fleet.len()))),
    }
}

fn prefix(series: &CapacitySeries, start: f64) -> Result<CapacitySeries> {
    let n = ((start * series.len() as f64).ceil() as usize).min(series.len());
    if n < 2 {
        return Err(Error::DegenerateInput(format!("training fraction {start} leaves fewer than two points")));
    }
    Ok(series.head(n))
}

fn forecaster(config: &RunConfig, fleet: &Fleet) -> Result<Box<dyn Forecaster>> {
    let choice = parse_model(&config.kernel).map_err(|e| Error::Config(e.to_string()))?;
    let target = config.target.as_deref();
    Ok(match choice {
        ModelChoice::Ar(order) => Box::new(ArForecaster { order }),
        ModelChoice::Gp(kernel) if config.train_cells.is_empty() => {
            Box::new(GpForecaster { kernel, mean: config.mean, config: config.train.clone() })
        }
        ModelChoice::Gp(kernel) => {
            let auxiliary = config
                .train_cells
                .iter()
                .map(|id| {
                    if Some(id.as_str()) == target {
                        return Err(Error::Config(format!("target `{id}` cannot also be a training cell")));
                    }
                    fleet.get(id).cloned().ok_or_else(|| Error::Config(format!("cell `{id}` not found in the data")))
                })
                .collect::<Result<Vec<_>>>()?;
            Box::new(MogpForecaster { kernel, auxiliary, mean: config.mean, config: config.train.clone() })
        }
    })
}

fn create(dir: &Path, name: &str, written: &mut Vec<String>) -> Result<BufWriter<File>> {
    written.push(name.to_string());
    Ok(BufWriter::new(File::create(dir.join(name))?))
}

fn write_json<T: Serialize>(dir: &Path, name: &str, value: &T, written: &mut Vec<String>) -> Result<()> {
    let mut w = create(dir, name, written)?;
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

fn csv_writer(dir: &Path, name: &str, written: &mut Vec<String>) -> Result<csv::Writer<BufWriter<File>>> {
    Ok(csv::Writer::from_writer(create(dir, name, written)?))
}

fn opt(v: Option<f64>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

/// Executes a validated configuration and returns the files it wrote,
/// relative to the output directory.
pub fn run(config: &RunConfig) -> Result<Vec<String>> {
    let fleet = load_csv(&config.data, &config.schema)?;
    let out = &config.out;
    std::fs::create_dir_all(out)?;
    let mut written = Vec::new();
    match config.command {
        Command::Fit => run_fit(config, &fleet, out, &mut written)?,
        Command::KernelSearch => run_search(config, &fleet, out, &mut written)?,
        Command::Forecast => run_forecast(config, &fleet, out, &mut written)?,
        Command::Lookahead => run_lookahead(config, &fleet, out, &mut written)?,
        Command::Evaluate | Command::MogpEvaluate => run_evaluate(config, &fleet, out, &mut written)?,
    }
    let manifest = Manifest {
        program: env!("CARGO_PKG_NAME"),
        version: env!("CARGO_PKG_VERSION"),
        seed: config.seed(),
        config,
        args: config.to_args(),
        outputs: written.clone(),
    };
    let mut all = Vec::new();
    write_json(out, "manifest.json", &manifest, &mut all)?;
    all.extend(written);
    Ok(all)
}

#[derive(Serialize)]
struct FitOutput {
    cell_id: String,
    n_train: usize,
    nlml: f64,
    model: crate::gp::ModelSummary,
    restarts: Vec<RestartDiagnostics>,
}

fn run_fit(config: &RunConfig, fleet: &Fleet, out: &Path, written: &mut Vec<String>) -> Result<()> {
    let series = target_series(fleet, config.target.as_deref())?;
    let history = prefix(series, config.start)?;
    let kernel: Kernel = config.kernel.parse()?;
    let model = GpModel::from_series(kernel, config.mean, &history)?;
    let fit = train(&model, &config.train)?;
    let model = fit.model;
    let summary = model.summary()?;
    write_json(
        out,
        "fit.json",
        &FitOutput {
            cell_id: series.cell_id().to_string(),
            n_train: history.len(),
            nlml: fit.nlml,
            model: summary,
            restarts: fit.restarts,
        },
        written,
    )?;

    // Posterior over every observed x, trained part included.
    let test: Vec<LabeledInput> = series.cycles().iter().map(|&x| LabeledInput::new(x, 1)).collect();
    let post = model.decompose_posterior(&test)?;
    let (lower, upper) = post.credible_bounds();
    let sd = post.std_dev(false);
    let mut w = csv_writer(out, "posterior.csv", written)?;
    w.write_record(["x", "actual", "train", "mean", "lower", "upper", "latent_sd"])?;
    for i in 0..test.len() {
        w.write_record([
            series.cycles()[i].to_string(),
            series.capacities()[i].to_string(),
            u8::from(i < history.len()).to_string(),
            post.mean[i].to_string(),
            lower[i].to_string(),
            upper[i].to_string(),
            sd[i].to_string(),
        ])?;
    }
    w.flush()?;

    let mut w = csv_writer(out, "components.csv", written)?;
    w.write_record(["component", "x", "mean", "sd"])?;
    let prior = model.mean().eval(series.cycles())?;
    for (i, x) in series.cycles().iter().enumerate() {
        w.write_record(["prior_mean".to_string(), x.to_string(), prior[i].to_string(), "0".to_string()])?;
    }
    for c in post.components.iter().flatten() {
        for (i, x) in series.cycles().iter().enumerate() {
            w.write_record([c.name.clone(), x.to_string(), c.mean[i].to_string(), c.variance[i].sqrt().to_string()])?;
        }
    }
    w.flush()?;
    Ok(())
}

fn run_search(config: &RunConfig, fleet: &Fleet, out: &Path, written: &mut Vec<String>) -> Result<()> {
    let series = target_series(fleet, config.target.as_deref())?;
    let bases = config.bases.iter().map(|b| b.parse::<Kernel>()).collect::<Result<Vec<_>>>()?;
    let result = kernel_search(series, &bases, config.mean, &config.train)?;
    debug_assert_eq!(result.entries.len(), candidate_kernels(&bases).len());
    write_json(out, "kernel_search.json", &result, written)?;
    result.write_csv(create(out, "kernel_search.csv", written)?)?;
    if result.entries.iter().all(|e| e.lml.is_none()) {
        return Err(Error::Training(result.entries.iter().filter_map(|e| e.error.clone()).collect()));
    }
    Ok(())
}

fn run_forecast(config: &RunConfig, fleet: &Fleet, out: &Path, written: &mut Vec<String>) -> Result<()> {
    let series = target_series(fleet, config.target.as_deref())?;
    let history = prefix(series, config.start)?;
    let model = forecaster(config, fleet)?;
    let fitted = model.fit(&history, config.seed(), None)?;
    let last_x = series.cycles()[series.len() - 1];
    let curve = forecast_eol(fitted.as_ref(), &history, config.eol, 2.0 * last_x)?;

    #[derive(Serialize)]
    struct ForecastOutput<'a> {
        cell_id: &'a str,
        model: String,
        eol_threshold: f64,
        forecast: &'a crate::prognostics::EolForecast,
        fitted: Option<crate::gp::ModelSummary>,
    }
    write_json(
        out,
        "forecast.json",
        &ForecastOutput {
            cell_id: series.cell_id(),
            model: model.name(),
            eol_threshold: config.eol,
            forecast: &curve.forecast,
            fitted: fitted.summary(),
        },
        written,
    )?;
    let mut w = csv_writer(out, "forecast_curve.csv", written)?;
    w.write_record(["x", "mean", "lower", "upper"])?;
    for (i, x) in curve.grid.iter().enumerate() {
        let m = curve.prediction.mean[i];
        let s = curve.prediction.sigma.as_ref().map(|s| s[i]);
        w.write_record([x.to_string(), m.to_string(), opt(s.map(|s| m - 2.0 * s)), opt(s.map(|s| m + 2.0 * s))])?;
    }
    w.flush()?;
    debug_assert_eq!(curve.grid, eol_grid(&history, 2.0 * last_x));
    Ok(())
}

fn sweep_config(config: &RunConfig) -> SweepConfig {
    SweepConfig {
        start_fraction: config.start,
        eol_threshold: config.eol,
        horizon_x: None,
        seed: config.seed(),
        warm_start: config.warm_start,
    }
}

fn run_lookahead(config: &RunConfig, fleet: &Fleet, out: &Path, written: &mut Vec<String>) -> Result<()> {
    let series = target_series(fleet, config.target.as_deref())?;
    let model = forecaster(config, fleet)?;
    let report = lookahead(series, model.as_ref(), &config.horizons, &sweep_config(config))?;
    write_json(out, "lookahead.json", &report, written)?;
    report.write_trace_csv(create(out, "lookahead_trace.csv", written)?)?;
    if report.horizons.iter().all(|h| h.rmse.is_none()) {
        return Err(Error::Evaluation(format!("every origin failed for {}", report.model)));
    }
    Ok(())
}

fn run_evaluate(config: &RunConfig, fleet: &Fleet, out: &Path, written: &mut Vec<String>) -> Result<()> {
    let series = target_series(fleet, config.target.as_deref())?;
    let model = forecaster(config, fleet)?;
    let report = evaluate(series, model.as_ref(), &sweep_config(config), &config.horizons)?;
    write_json(out, "evaluation.json", &report, written)?;
    report.write_csv(create(out, "evaluation.csv", written)?)?;
    write_eol_trace(&report, create(out, "eol_trace.csv", written)?)?;
    if let Some(la) = &report.lookahead {
        la.write_trace_csv(create(out, "lookahead_trace.csv", written)?)?;
    }
    if report.n_failed == report.records.len() {
        return Err(Error::Evaluation(format!("every origin failed for {}", report.model)));
    }
    Ok(())
}

fn write_eol_trace<W: Write>(report: &EvaluationReport, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["c", "current_x", "eol_mean", "eol_lower", "eol_upper", "eol_scored", "clamped", "true_eol"])?;
    for r in &report.records {
        let Some(e) = &r.eol else { continue };
        w.write_record([
            r.current.to_string(),
            r.current_x.to_string(),
            e.eol_mean.to_string(),
            opt(e.eol_lower),
            opt(e.eol_upper),
            e.eol_scored.to_string(),
            e.clamped.to_string(),
            opt(report.true_eol),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Runs the program on `argv` and returns the process exit code.
pub fn main_with_args<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let config = match parse_args(argv) {
        Ok(c) => c,
        Err(ParseFailure::Clap(e)) => {
            let _ = e.print();
            return ParseFailure::Clap(e).exit_code();
        }
        Err(ParseFailure::Usage(e)) => {
            eprintln!("error: {e}");
            return EXIT_USAGE;
        }
    };
    let pool = match rayon::ThreadPoolBuilder::new().num_threads(config.jobs).build() {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: invalid value for --jobs: {e}");
            return EXIT_USAGE;
        }
    };
    match pool.install(|| run(&config)) {
        Ok(files) => {
            for f in files {
                println!("{}", config.out.join(f).display());
            }
            EXIT_OK
        }
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_FAILURE
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn data_file() -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        writeln!(f, "cell_id,cycle,capacity").unwrap();
        for i in 1..=30 {
            writeln!(f, "A,{i},{}", 2.0 - 0.01 * i as f64).unwrap();
        }
        f
    }

    fn parse(args: &[&str]) -> std::result::Result<RunConfig, ParseFailure> {
        parse_args(std::iter::once("gpprog").chain(args.iter().copied()))
    }

    #[test]
    fn fit_arguments() {
        let f = data_file();
        let path = f.path().to_str().unwrap();
        let c = parse(&["fit", "--data", path, "--kernel", "MA5+MA3", "--seed", "7"]).unwrap();
        assert_eq!(c.command, Command::Fit);
        assert_eq!(c.seed(), 7);
        assert!(matches!(c.kernel.parse::<Kernel>().unwrap(), Kernel::Sum(..)));
        let model = GpModel::from_series(c.kernel.parse().unwrap(), c.mean, &CapacitySeries::new("A", vec![1.0, 2.0], vec![1.0, 0.9]).unwrap()).unwrap();
        assert!(model.parameter_names().iter().any(|n| n == crate::gp::NOISE_PARAM));
    }

    #[test]
    fn search_over_four_bases_has_ten_candidates() {
        let f = data_file();
        let c = parse(&["kernel-search", "--data", f.path().to_str().unwrap(), "--bases", "SE,MA3,MA5,PER"]).unwrap();
        let bases: Vec<Kernel> = c.bases.iter().map(|b| b.parse().unwrap()).collect();
        assert_eq!(candidate_kernels(&bases).len(), 10);
    }

    #[test]
    fn usage_errors() {
        let f = data_file();
        let path = f.path().to_str().unwrap();
        let code = |args: &[&str]| match parse(args) {
            Ok(_) => EXIT_OK,
            Err(e) => e.exit_code(),
        };
        assert_eq!(code(&["fit"]), EXIT_USAGE);
        assert_eq!(code(&["fit", "--data", "/no/such/file.csv"]), EXIT_USAGE);
        assert_eq!(code(&["fit", "--data", path, "--kernel", "MA4"]), EXIT_USAGE);
        assert_eq!(code(&["fit", "--data", path, "--bogus"]), EXIT_USAGE);
        assert_eq!(code(&["evaluate", "--data", path, "--eol", "1.5"]), EXIT_USAGE);
        assert_eq!(code(&["lookahead", "--data", path, "--horizons", "0,5"]), EXIT_USAGE);
        assert_eq!(code(&["mogp-evaluate", "--data", path, "--train-cells", "B"]), EXIT_USAGE);
        assert_eq!(code(&["--help"]), EXIT_OK);
        match parse(&["fit", "--data", path, "--mean", "LINEAR"]) {
            Err(ParseFailure::Usage(e)) => assert_eq!(e.flag.as_deref(), Some("mean")),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn ar_models_parse() {
        assert!(matches!(parse_model("AR10").unwrap(), ModelChoice::Ar(10)));
        assert!(matches!(parse_model("AR(3)").unwrap(), ModelChoice::Ar(3)));
        assert!(parse_model("AR0").is_err());
    }

    #[test]
    fn manifest_args_round_trip() {
        let f = data_file();
        let path = f.path().to_str().unwrap();
        let c = parse(&["evaluate", "--data", path, "--kernel", "MA3", "--horizons", "10,5", "--warm-start", "--seed", "3"])
            .unwrap();
        let again = parse_args(std::iter::once("gpprog".to_string()).chain(c.to_args())).unwrap();
        assert_eq!(again, c);
    }

    #[test]
    fn fit_writes_outputs() {
        let f = data_file();
        let dir = tempfile::tempdir().unwrap();
        let c = parse(&[
            "fit", "--data", f.path().to_str().unwrap(), "--kernel", "MA3", "--restarts", "2", "--start", "0.6",
            "--out", dir.path().to_str().unwrap(),
        ])
        .unwrap();
        let files = run(&c).unwrap();
        assert_eq!(files, ["manifest.json", "fit.json", "posterior.csv", "components.csv"]);
        let posterior = std::fs::read_to_string(dir.path().join("posterior.csv")).unwrap();
        assert_eq!(posterior.lines().count(), 31);
    }
}
