//! Forecasting workflows on top of trained models: n-step lookahead, end of
//! life with credible bounds, rolling-origin evaluation and the
//! autoregressive baseline.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{rolling_origins, split, CapacitySeries, SplitSpec};
use crate::error::{Error, Result};
use crate::gp::{GpModel, ModelSummary};
use crate::kernels::{Kernel, LabelCovariance, LabeledInput};
use crate::linalg::lstsq_min_norm;
use crate::meanfn::MeanKind;
use crate::optimize::{derive_seed, train_from, TrainConfig};

/// Points on the real-valued EoL grid.
const REAL_GRID_POINTS: usize = 200;

pub fn rmse_q(predicted: &[f64], actual: &[f64]) -> Result<f64> {
    if predicted.is_empty() || predicted.len() != actual.len() {
        return Err(Error::DegenerateInput(format!(
            "RMSE needs equal non-empty lists, got {} and {}",
            predicted.len(),
            actual.len()
        )));
    }
    let sse: f64 = predicted.iter().zip(actual).map(|(p, a)| (p - a) * (p - a)).sum();
    Ok((sse / predicted.len() as f64).sqrt())
}

/// RMSE of EoL predictions; infinite predictions count as `horizon`.
pub fn rmse_eol(predictions: &[f64], truth: f64, horizon: f64) -> Result<f64> {
    if predictions.is_empty() {
        return Err(Error::DegenerateInput("no EoL predictions".into()));
    }
    if predictions.iter().all(|p| !p.is_finite()) {
        return Err(Error::UndefinedMetric("every EoL prediction is infinite".into()));
    }
    let clamped: Vec<f64> = predictions.iter().map(|&p| if p.is_finite() { p } else { horizon }).collect();
    rmse_q(&clamped, &vec![truth; clamped.len()])
}

/// First `x > start_x` at which the curve reaches `threshold` from above,
/// linearly interpolated; `+inf` when it never does.
///
/// If the first grid point after `start_x` is already at or below the
/// threshold, that point is returned.
pub fn find_eol(xs: &[f64], values: &[f64], threshold: f64, start_x: f64) -> f64 {
    let mut prev: Option<(f64, f64)> = None;
    for (&x, &v) in xs.iter().zip(values) {
        if x <= start_x {
            continue;
        }
        if v <= threshold {
            return match prev {
                Some((px, pv)) => px + (pv - threshold) / (pv - v) * (x - px),
                None => x,
            };
        }
        prev = Some((x, v));
    }
    f64::INFINITY
}

/// Forecast grid after the last training point up to `horizon_x`:
/// one-cycle steps for integer cycles, otherwise uniform.
pub fn eol_grid(history: &CapacitySeries, horizon_x: f64) -> Vec<f64> {
    let last = history.cycles()[history.len() - 1];
    if horizon_x <= last {
        return Vec::new();
    }
    if history.has_integer_cycles() {
        let n = (horizon_x - last).floor() as usize;
        (1..=n).map(|k| last + k as f64).collect()
    } else {
        let step = (horizon_x - last) / REAL_GRID_POINTS as f64;
        (1..=REAL_GRID_POINTS).map(|k| last + k as f64 * step).collect()
    }
}

/// Predictive mean and, where the model provides one, standard deviation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub mean: Vec<f64>,
    pub sigma: Option<Vec<f64>>,
}

/// A forecasting method that can be fitted to a history.
pub trait Forecaster: Sync {
    fn name(&self) -> String;

    /// Fits to `history`; `warm` is the state of a previous fit, if any.
    fn fit(&self, history: &CapacitySeries, seed: u64, warm: Option<&[f64]>) -> Result<Box<dyn Fitted>>;
}

pub trait Fitted: Send {
    fn predict(&self, xs: &[f64]) -> Result<Prediction>;

    /// State to warm-start the next fit from.
    fn warm_state(&self) -> Option<Vec<f64>> {
        None
    }

    fn summary(&self) -> Option<ModelSummary> {
        None
    }
}

/// Single-output GP, retrained from Latin-hypercube restarts.
#[derive(Debug, Clone)]
pub struct GpForecaster {
    pub kernel: Kernel,
    pub mean: MeanKind,
    pub config: TrainConfig,
}

struct FittedGp {
    model: GpModel,
    label: usize,
}

impl Fitted for FittedGp {
    fn predict(&self, xs: &[f64]) -> Result<Prediction> {
        let post = self.model.posterior_x(xs, self.label)?;
        Ok(Prediction { sigma: Some(post.std_dev(true)), mean: post.mean })
    }

    fn warm_state(&self) -> Option<Vec<f64>> {
        Some(self.model.free_parameters())
    }

    fn summary(&self) -> Option<ModelSummary> {
        self.model.summary().ok()
    }
}

impl Forecaster for GpForecaster {
    fn name(&self) -> String {
        format!("GP({}, {})", self.kernel, self.mean)
    }

    fn fit(&self, history: &CapacitySeries, seed: u64, warm: Option<&[f64]>) -> Result<Box<dyn Fitted>> {
        let model = GpModel::from_series(self.kernel.clone(), self.mean, history)?;
        let fit = train_from(&model, &self.config.with_seed(seed), warm)?;
        Ok(Box::new(FittedGp { model: fit.model, label: 1 }))
    }
}

/// Multi-output GP: auxiliary cells are used in full, the target up to the
/// current cycle. Auxiliary cells take labels `1..m`, the target label `m`.
#[derive(Debug, Clone)]
pub struct MogpForecaster {
    /// Input kernel; the label covariance is added on top.
    pub kernel: Kernel,
    pub auxiliary: Vec<CapacitySeries>,
    pub mean: MeanKind,
    pub config: TrainConfig,
}

impl MogpForecaster {
    pub fn outputs(&self) -> usize {
        self.auxiliary.len() + 1
    }

    /// The model before training, for a given target history.
    pub fn build(&self, history: &CapacitySeries) -> Result<GpModel> {
        if self.auxiliary.is_empty() {
            return Err(Error::Config("a multi-output model needs at least one auxiliary cell".into()));
        }
        let m = self.outputs();
        let kernel = Kernel::coregionalized(LabelCovariance::independent(m)?, self.kernel.clone());
        let mut inputs = Vec::new();
        let mut targets = Vec::new();
        for (i, cell) in self.auxiliary.iter().chain(std::iter::once(history)).enumerate() {
            inputs.extend(cell.cycles().iter().map(|&x| LabeledInput::new(x, i + 1)));
            targets.extend_from_slice(cell.capacities());
        }
        let xs: Vec<f64> = inputs.iter().map(|p| p.x).collect();
        let mean = self.mean.initialize(&xs, &targets)?;
        let var = crate::gp::variance(&targets).max(1e-8);
        GpModel::new(kernel, mean, 1e-2 * var, inputs, targets)
    }
}

impl Forecaster for MogpForecaster {
    fn name(&self) -> String {
        let cells: Vec<&str> = self.auxiliary.iter().map(|s| s.cell_id()).collect();
        format!("MOGP{}({}; {})", self.outputs(), self.kernel, cells.join(","))
    }

    fn fit(&self, history: &CapacitySeries, seed: u64, warm: Option<&[f64]>) -> Result<Box<dyn Fitted>> {
        let model = self.build(history)?;
        let fit = train_from(&model, &self.config.with_seed(seed), warm)?;
        Ok(Box::new(FittedGp { model: fit.model, label: self.outputs() }))
    }
}

/// Least-squares autoregression with intercept, iterated forward.
#[derive(Debug, Clone, Copy)]
pub struct ArForecaster {
    pub order: usize,
}

struct FittedAr {
    coefficients: Vec<f64>,
    tail: Vec<f64>,
    last_x: f64,
    step: f64,
}

impl FittedAr {
    fn iterate(&self, steps: usize) -> Vec<f64> {
        let p = self.coefficients.len() - 1;
        let mut window = self.tail.clone();
        let mut out = Vec::with_capacity(steps);
        for _ in 0..steps {
            let n = window.len();
            let next = self.coefficients[0]
                + (1..=p).map(|k| self.coefficients[k] * window[n - k]).sum::<f64>();
            window.push(next);
            out.push(next);
        }
        out
    }
}

impl Fitted for FittedAr {
    fn predict(&self, xs: &[f64]) -> Result<Prediction> {
        let steps: Vec<usize> = xs
            .iter()
            .map(|&x| {
                let k = ((x - self.last_x) / self.step).round();
                if k < 1.0 {
                    Err(Error::Bounds(format!("AR forecasts start after x = {}", self.last_x)))
                } else {
                    Ok(k as usize)
                }
            })
            .collect::<Result<_>>()?;
        let path = self.iterate(steps.iter().copied().max().unwrap_or(0));
        Ok(Prediction { mean: steps.iter().map(|&k| path[k - 1]).collect(), sigma: None })
    }
}

fn fit_ar(series: &CapacitySeries, order: usize) -> Result<FittedAr> {
    if order == 0 {
        return Err(Error::Config("AR order must be at least 1".into()));
    }
    let y = series.capacities();
    let n = y.len();
    if n <= order {
        return Err(Error::DegenerateInput(format!(
            "AR({order}) needs more than {order} observations, got {n}"
        )));
    }
    let rows = n - order;
    let a = DMatrix::from_fn(rows, order + 1, |i, j| if j == 0 { 1.0 } else { y[order + i - j] });
    let b = DVector::from_iterator(rows, y[order..].iter().copied());
    let coefficients = lstsq_min_norm(&a, &b);
    let xs = series.cycles();
    let step = if n > 1 { (xs[n - 1] - xs[0]) / (n - 1) as f64 } else { 1.0 };
    Ok(FittedAr {
        coefficients: coefficients.iter().copied().collect(),
        tail: y[n - order..].to_vec(),
        last_x: xs[n - 1],
        step,
    })
}

/// `horizon` iterated AR(`order`) forecasts past the end of `series`.
pub fn ar_baseline(series: &CapacitySeries, order: usize, horizon: usize) -> Result<Vec<f64>> {
    Ok(fit_ar(series, order)?.iterate(horizon))
}

impl Forecaster for ArForecaster {
    fn name(&self) -> String {
        format!("AR({})", self.order)
    }

    fn fit(&self, history: &CapacitySeries, _seed: u64, _warm: Option<&[f64]>) -> Result<Box<dyn Fitted>> {
        Ok(Box::new(fit_ar(history, self.order)?))
    }
}

/// Serializes non-finite values as strings so they survive JSON.
mod ext_f64 {
    use serde::{Deserialize, Deserializer, Serializer};

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Text(String),
    }

    fn parse<E: serde::de::Error>(r: Repr) -> Result<f64, E> {
        match r {
            Repr::Num(v) => Ok(v),
            Repr::Text(s) => s.parse().map_err(E::custom),
        }
    }

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else {
            s.serialize_str(&v.to_string())
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        parse(Repr::deserialize(d)?)
    }

    pub mod option {
        use super::*;

        pub fn serialize<S: Serializer>(v: &Option<f64>, s: S) -> Result<S::Ok, S::Error> {
            match v {
                Some(v) => super::serialize(v, s),
                None => s.serialize_none(),
            }
        }

        pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<f64>, D::Error> {
            Option::<Repr>::deserialize(d)?.map(parse).transpose()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EolForecast {
    /// Number of training observations.
    pub current: usize,
    pub current_x: f64,
    /// Crossing of the mean curve, `inf` if none within the horizon.
    #[serde(with = "ext_f64")]
    pub eol_mean: f64,
    /// Crossing of `mean - 2 sd`; absent without predictive uncertainty.
    #[serde(with = "ext_f64::option")]
    pub eol_lower: Option<f64>,
    /// Crossing of `mean + 2 sd`.
    #[serde(with = "ext_f64::option")]
    pub eol_upper: Option<f64>,
    /// `eol_mean` if finite, otherwise the horizon.
    pub eol_scored: f64,
    pub clamped: bool,
}

/// EoL forecast together with the curve it was read from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EolCurve {
    pub forecast: EolForecast,
    pub grid: Vec<f64>,
    pub prediction: Prediction,
}

/// Extrapolates a fitted model on the EoL grid and reads off the crossings.
pub fn forecast_eol(model: &dyn Fitted, history: &CapacitySeries, threshold: f64, horizon_x: f64) -> Result<EolCurve> {
    let current_x = history.cycles()[history.len() - 1];
    let grid = eol_grid(history, horizon_x);
    if grid.is_empty() {
        return Err(Error::Config(format!("EoL horizon {horizon_x} is not after x = {current_x}")));
    }
    let prediction = model.predict(&grid)?;
    let eol_mean = find_eol(&grid, &prediction.mean, threshold, current_x);
    let (eol_lower, eol_upper) = match &prediction.sigma {
        Some(sd) => {
            let lower: Vec<f64> = prediction.mean.iter().zip(sd).map(|(m, s)| m - 2.0 * s).collect();
            let upper: Vec<f64> = prediction.mean.iter().zip(sd).map(|(m, s)| m + 2.0 * s).collect();
            (Some(find_eol(&grid, &lower, threshold, current_x)), Some(find_eol(&grid, &upper, threshold, current_x)))
        }
        None => (None, None),
    };
    let clamped = !eol_mean.is_finite();
    Ok(EolCurve {
        forecast: EolForecast {
            current: history.len(),
            current_x,
            eol_mean,
            eol_lower,
            eol_upper,
            eol_scored: if clamped { horizon_x } else { eol_mean },
            clamped,
        },
        grid,
        prediction,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    pub start_fraction: f64,
    pub eol_threshold: f64,
    /// EoL search horizon; twice the last observed x when absent.
    pub horizon_x: Option<f64>,
    pub seed: u64,
    /// Sequential sweep, each fit warm-started from the previous optimum.
    pub warm_start: bool,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self { start_fraction: 0.2, eol_threshold: 0.7, horizon_x: None, seed: 0, warm_start: false }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub current: usize,
    pub current_x: f64,
    pub rmse_q: Option<f64>,
    pub eol: Option<EolForecast>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HorizonResult {
    pub horizon: usize,
    pub rmse: Option<f64>,
    pub n_points: usize,
    /// Origins where `c + n` runs past the data.
    pub skipped: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub current: usize,
    pub horizon: usize,
    pub target_x: f64,
    pub mean: f64,
    pub sigma: Option<f64>,
    pub actual: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LookaheadReport {
    pub cell_id: String,
    pub model: String,
    pub horizons: Vec<HorizonResult>,
    pub trace: Vec<TraceRow>,
    pub failures: Vec<(usize, String)>,
}

impl LookaheadReport {
    pub fn rmse_at(&self, horizon: usize) -> Option<f64> {
        self.horizons.iter().find(|h| h.horizon == horizon).and_then(|h| h.rmse)
    }

    pub fn write_trace_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["c", "horizon", "target_x", "mean", "sigma", "actual"])?;
        for r in &self.trace {
            w.write_record([
                r.current.to_string(),
                r.horizon.to_string(),
                r.target_x.to_string(),
                r.mean.to_string(),
                r.sigma.map(|s| s.to_string()).unwrap_or_default(),
                r.actual.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub cell_id: String,
    pub model: String,
    pub eol_threshold: f64,
    pub start_fraction: f64,
    pub horizon_x: f64,
    /// First crossing of the threshold in the observed data.
    #[serde(with = "ext_f64::option")]
    pub true_eol: Option<f64>,
    pub records: Vec<EvalRecord>,
    pub rmse_eol: Option<f64>,
    pub n_failed: usize,
    pub lookahead: Option<LookaheadReport>,
}

impl EvaluationReport {
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let opt = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_default();
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["c", "current_x", "rmse_q", "eol_mean", "eol_lower", "eol_upper", "eol_scored", "clamped", "error"])?;
        for r in &self.records {
            let e = r.eol.as_ref();
            w.write_record([
                r.current.to_string(),
                r.current_x.to_string(),
                opt(r.rmse_q),
                opt(e.map(|e| e.eol_mean)),
                opt(e.and_then(|e| e.eol_lower)),
                opt(e.and_then(|e| e.eol_upper)),
                opt(e.map(|e| e.eol_scored)),
                e.map(|e| e.clamped.to_string()).unwrap_or_default(),
                r.error.clone().unwrap_or_default(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// What a sweep computes at each origin.
struct Tasks<'a> {
    eol: bool,
    horizons: &'a [usize],
}

struct OriginResult {
    current: usize,
    current_x: f64,
    rmse_q: Option<f64>,
    eol: Option<EolForecast>,
    lookahead: Vec<TraceRow>,
    error: Option<String>,
}

fn run_origin(
    series: &CapacitySeries,
    spec: &SplitSpec,
    forecaster: &dyn Forecaster,
    tasks: &Tasks,
    horizon_x: f64,
    seed: u64,
    warm: Option<&[f64]>,
) -> (OriginResult, Option<Vec<f64>>) {
    let c = spec.current;
    let current_x = series.cycles()[c - 1];
    let attempt = || -> Result<(OriginResult, Option<Vec<f64>>)> {
        let (train, test) = split(series, spec)?;
        let fitted = forecaster.fit(&train, seed, warm)?;
        let pred = fitted.predict(test.cycles())?;
        let rmse = rmse_q(&pred.mean, test.capacities())?;
        let mut lookahead = Vec::new();
        for &n in tasks.horizons {
            if n <= test.len() {
                lookahead.push(TraceRow {
                    current: c,
                    horizon: n,
                    target_x: test.cycles()[n - 1],
                    mean: pred.mean[n - 1],
                    sigma: pred.sigma.as_ref().map(|s| s[n - 1]),
                    actual: test.capacities()[n - 1],
                });
            }
        }
        let eol = if tasks.eol {
            Some(forecast_eol(fitted.as_ref(), &train, spec.eol_threshold, horizon_x)?.forecast)
        } else {
            None
        };
        Ok((OriginResult { current: c, current_x, rmse_q: Some(rmse), eol, lookahead, error: None }, fitted.warm_state()))
    };
    match attempt() {
        Ok(r) => r,
        Err(e) => (
            OriginResult { current: c, current_x, rmse_q: None, eol: None, lookahead: Vec::new(), error: Some(e.to_string()) },
            None,
        ),
    }
}

fn sweep(
    series: &CapacitySeries,
    forecaster: &dyn Forecaster,
    config: &SweepConfig,
    tasks: &Tasks,
) -> Result<(Vec<OriginResult>, f64)> {
    if tasks.horizons.contains(&0) {
        return Err(Error::Config("lookahead horizons must be at least 1".into()));
    }
    let specs = rolling_origins(series, config.start_fraction, config.eol_threshold)?;
    let last_x = series.cycles()[series.len() - 1];
    let horizon_x = config.horizon_x.unwrap_or(2.0 * last_x);
    if !(horizon_x > last_x) {
        return Err(Error::Config(format!("EoL horizon {horizon_x} must exceed the last observation {last_x}")));
    }
    let results = if config.warm_start {
        let mut warm: Option<Vec<f64>> = None;
        let mut out = Vec::with_capacity(specs.len());
        for spec in &specs {
            let seed = derive_seed(config.seed, spec.current as u64);
            let (r, state) = run_origin(series, spec, forecaster, tasks, horizon_x, seed, warm.as_deref());
            if state.is_some() {
                warm = state;
            }
            out.push(r);
        }
        out
    } else {
        specs
            .par_iter()
            .map(|spec| {
                let seed = derive_seed(config.seed, spec.current as u64);
                run_origin(series, spec, forecaster, tasks, horizon_x, seed, None).0
            })
            .collect()
    };
    Ok((results, horizon_x))
}

fn lookahead_report(series: &CapacitySeries, forecaster: &dyn Forecaster, horizons: &[usize], results: &[OriginResult]) -> LookaheadReport {
    let trace: Vec<TraceRow> = results.iter().flat_map(|r| r.lookahead.iter().cloned()).collect();
    let succeeded: Vec<&OriginResult> = results.iter().filter(|r| r.error.is_none()).collect();
    let horizons = horizons
        .iter()
        .map(|&n| {
            let rows: Vec<&TraceRow> = trace.iter().filter(|r| r.horizon == n).collect();
            let mean: Vec<f64> = rows.iter().map(|r| r.mean).collect();
            let actual: Vec<f64> = rows.iter().map(|r| r.actual).collect();
            HorizonResult {
                horizon: n,
                rmse: rmse_q(&mean, &actual).ok(),
                n_points: rows.len(),
                skipped: succeeded.len() - rows.len(),
            }
        })
        .collect();
    LookaheadReport {
        cell_id: series.cell_id().to_string(),
        model: forecaster.name(),
        horizons,
        trace,
        failures: results.iter().filter_map(|r| r.error.clone().map(|e| (r.current, e))).collect(),
    }
}

/// n-step-ahead forecasts from every rolling origin.
///
/// One model is trained per origin `c` and read at `x_{c+n}` for every
/// horizon `n`; pairs with `c + n` past the end of the data are skipped.
pub fn lookahead(
    series: &CapacitySeries,
    forecaster: &dyn Forecaster,
    horizons: &[usize],
    config: &SweepConfig,
) -> Result<LookaheadReport> {
    if horizons.is_empty() {
        return Err(Error::Config("no lookahead horizons given".into()));
    }
    let (results, _) = sweep(series, forecaster, config, &Tasks { eol: false, horizons })?;
    Ok(lookahead_report(series, forecaster, horizons, &results))
}

/// Full rolling-origin evaluation: RMSE on the remaining data and an EoL
/// forecast at every origin, aggregated into RMSE_EoL. Failing origins are
/// recorded, not fatal. Lookahead rows come from the same fits.
pub fn evaluate(
    series: &CapacitySeries,
    forecaster: &dyn Forecaster,
    config: &SweepConfig,
    horizons: &[usize],
) -> Result<EvaluationReport> {
    let (results, horizon_x) = sweep(series, forecaster, config, &Tasks { eol: true, horizons })?;
    let true_eol = find_eol(series.cycles(), series.capacities(), config.eol_threshold, f64::NEG_INFINITY);
    let true_eol = true_eol.is_finite().then_some(true_eol);
    let scored: Vec<f64> = results.iter().filter_map(|r| r.eol.as_ref().map(|e| e.eol_scored)).collect();
    let rmse_eol = match true_eol {
        Some(t) if !scored.is_empty() => Some(rmse_eol(&scored, t, horizon_x)?),
        _ => None,
    };
    let lookahead = (!horizons.is_empty()).then(|| lookahead_report(series, forecaster, horizons, &results));
    let n_failed = results.iter().filter(|r| r.error.is_some()).count();
    Ok(EvaluationReport {
        cell_id: series.cell_id().to_string(),
        model: forecaster.name(),
        eol_threshold: config.eol_threshold,
        start_fraction: config.start_fraction,
        horizon_x,
        true_eol,
        records: results
            .into_iter()
            .map(|r| EvalRecord { current: r.current, current_x: r.current_x, rmse_q: r.rmse_q, eol: r.eol, error: r.error })
            .collect(),
        rmse_eol,
        n_failed,
        lookahead,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Knows the whole series and predicts it exactly.
    struct Oracle {
        series: CapacitySeries,
        extrapolate: fn(f64) -> f64,
    }

    struct OracleFit {
        series: CapacitySeries,
        extrapolate: fn(f64) -> f64,
    }

    impl Fitted for OracleFit {
        fn predict(&self, xs: &[f64]) -> Result<Prediction> {
            let mean = xs
                .iter()
                .map(|x| {
                    let i = self.series.cycles().iter().position(|c| c == x);
                    i.map(|i| self.series.capacities()[i]).unwrap_or_else(|| (self.extrapolate)(*x))
                })
                .collect();
            Ok(Prediction { mean, sigma: Some(vec![0.0; xs.len()]) })
        }
    }

    impl Forecaster for Oracle {
        fn name(&self) -> String {
            "oracle".into()
        }

        fn fit(&self, _: &CapacitySeries, _: u64, _: Option<&[f64]>) -> Result<Box<dyn Fitted>> {
            Ok(Box::new(OracleFit { series: self.series.clone(), extrapolate: self.extrapolate }))
        }
    }

    fn linear(n: usize) -> CapacitySeries {
        let xs: Vec<f64> = (0..n).map(|i| i as f64).collect();
        let ys = xs.iter().map(|x| 1.0 - 0.005 * x).collect();
        CapacitySeries::new("L", xs, ys).unwrap()
    }

    #[test]
    fn rmse_hand_cases() {
        assert_eq!(rmse_q(&[0.3, 0.5], &[0.3, 0.5]).unwrap(), 0.0);
        assert!((rmse_q(&[1.2, 0.7], &[1.0, 0.5]).unwrap() - 0.2).abs() < 1e-12);
        assert!((rmse_q(&[0.9, 0.8], &[1.0, 1.0]).unwrap() - (0.025f64).sqrt()).abs() < 1e-12);
        assert!((rmse_q(&[0.9, 0.8], &[1.0, 1.0]).unwrap() - 0.1581).abs() < 1e-4);
        assert!(matches!(rmse_q(&[], &[]), Err(Error::DegenerateInput(_))));
        assert!(rmse_q(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn rmse_eol_hand_cases() {
        assert_eq!(rmse_eol(&[100.0, 100.0], 100.0, 300.0).unwrap(), 0.0);
        assert!((rmse_eol(&[110.0], 100.0, 300.0).unwrap() - 10.0).abs() < 1e-12);
        assert!((rmse_eol(&[90.0, 110.0], 100.0, 300.0).unwrap() - 10.0).abs() < 1e-12);
        assert!((rmse_eol(&[100.0, f64::INFINITY], 100.0, 300.0).unwrap() - (20_000.0f64).sqrt()).abs() < 1e-9);
        assert!(matches!(rmse_eol(&[f64::INFINITY], 100.0, 300.0), Err(Error::UndefinedMetric(_))));
    }

    #[test]
    fn find_eol_cases() {
        let xs: Vec<f64> = (0..200).map(|i| i as f64).collect();
        let line: Vec<f64> = xs.iter().map(|x| 1.0 - 0.005 * x).collect();
        assert!((find_eol(&xs, &line, 0.7, 0.0) - 60.0).abs() < 1e-9);
        assert_eq!(find_eol(&xs, &vec![0.9; 200], 0.7, 0.0), f64::INFINITY);

        let dip: Vec<f64> = xs
            .iter()
            .map(|&x| if (40.0..50.0).contains(&x) || x >= 80.0 { 0.6 } else { 0.8 })
            .collect();
        assert_eq!(find_eol(&xs, &dip, 0.7, 0.0), 39.5);
        assert_eq!(find_eol(&xs, &dip, 0.7, 50.0), 79.5);
        // already below at the first point after the origin
        assert_eq!(find_eol(&xs, &line, 0.99, 10.0), 11.0);
    }

    #[test]
    fn first_crossing_matches_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for _ in 0..100 {
            let n = rng.gen_range(2..60);
            let mut x = 0.0;
            let xs: Vec<f64> = (0..n)
                .map(|_| {
                    x += rng.gen_range(0.1..3.0);
                    x
                })
                .collect();
            let vs: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..1.0)).collect();
            let thr = rng.gen_range(0.2..0.8);
            let start = rng.gen_range(-1.0..xs[n / 2]);
            let got = find_eol(&xs, &vs, thr, start);

            // dense scan of the piecewise-linear curve
            let pts: Vec<usize> = (0..n).filter(|&i| xs[i] > start).collect();
            let mut expected = f64::INFINITY;
            'scan: for (k, &i) in pts.iter().enumerate() {
                if k == 0 {
                    if vs[i] <= thr {
                        expected = xs[i];
                        break;
                    }
                    continue;
                }
                let j = pts[k - 1];
                let steps = 20_000;
                for s in 1..=steps {
                    let t = s as f64 / steps as f64;
                    let v = vs[j] + t * (vs[i] - vs[j]);
                    if v <= thr {
                        expected = xs[j] + t * (xs[i] - xs[j]);
                        break 'scan;
                    }
                }
            }
            if expected.is_finite() {
                let tol = (xs[n - 1] - xs[0]) / 20_000.0 + 1e-12;
                assert!((got - expected).abs() <= tol, "{got} vs {expected}");
            } else {
                assert_eq!(got, f64::INFINITY);
            }
        }
    }

    proptest! {
        #[test]
        fn crossing_property(vals in proptest::collection::vec(0.0f64..1.0, 2..40), thr in 0.1f64..0.9) {
            let xs: Vec<f64> = (0..vals.len()).map(|i| i as f64).collect();
            let x = find_eol(&xs, &vals, thr, -0.5);
            if x.is_finite() {
                let i = xs.iter().position(|&g| g >= x).unwrap();
                let v = if xs[i] == x { vals[i] } else { vals[i - 1] + (x - xs[i - 1]) * (vals[i] - vals[i - 1]) };
                prop_assert!(v <= thr + 1e-12);
                prop_assert!(vals[..i].iter().all(|&v| v > thr));
            } else {
                prop_assert!(vals.iter().all(|&v| v > thr));
            }
        }

        #[test]
        fn rmse_is_non_negative_and_zero_iff_equal(a in proptest::collection::vec(-1.0f64..1.0, 1..20), d in -1.0f64..1.0) {
            let b: Vec<f64> = a.iter().map(|v| v + d).collect();
            let r = rmse_q(&a, &b).unwrap();
            prop_assert!(r >= 0.0);
            prop_assert_eq!(r == 0.0, d == 0.0);
        }
    }

    #[test]
    fn grids() {
        let s = linear(10);
        assert_eq!(eol_grid(&s, 12.5), vec![10.0, 11.0, 12.0]);
        let real = CapacitySeries::new("R", vec![0.5, 1.7], vec![1.0, 0.9]).unwrap();
        let g = eol_grid(&real, 3.7);
        assert_eq!(g.len(), 200);
        assert!((g[199] - 3.7).abs() < 1e-12 && g[0] > 1.7);
    }

    #[test]
    fn perfect_oracle_scores_zero() {
        let series = linear(200);
        let oracle = Oracle { series: series.clone(), extrapolate: |x| 1.0 - 0.005 * x };
        let report = evaluate(&series, &oracle, &SweepConfig::default(), &[5, 10]).unwrap();
        assert_eq!(report.true_eol, Some(60.0));
        assert_eq!(report.records.len(), 160);
        assert!(report.records.iter().all(|r| r.rmse_q == Some(0.0)));
        // origins before the crossing see it exactly; later ones see the next grid point
        let before: Vec<f64> =
            report.records.iter().filter(|r| r.current_x < 60.0).map(|r| r.eol.as_ref().unwrap().eol_mean).collect();
        assert!(before.iter().all(|&e| (e - 60.0).abs() < 1e-9));
        let la = report.lookahead.unwrap();
        assert_eq!(la.rmse_at(5), Some(0.0));
        assert_eq!(la.horizons[1].skipped, 9);
    }

    #[test]
    fn oracle_rmse_eol_is_zero_before_crossing() {
        // ends at 0.72, never crossing 0.7
        let series = linear(57);
        let oracle = Oracle { series: series.clone(), extrapolate: |x| 1.0 - 0.005 * x };
        let cfg = SweepConfig { horizon_x: Some(100.0), ..Default::default() };
        let report = evaluate(&series, &oracle, &cfg, &[]).unwrap();
        assert_eq!(report.true_eol, None);
        assert_eq!(report.rmse_eol, None);
        assert!(report.records.iter().all(|r| (r.eol.as_ref().unwrap().eol_mean - 60.0).abs() < 1e-9));
    }

    #[test]
    fn eol_bounds_are_ordered() {
        let xs: Vec<f64> = (0..60).map(|i| i as f64).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let ys: Vec<f64> = xs.iter().map(|x| 1.0 - 0.006 * x + rng.gen_range(-0.002..0.002)).collect();
        let series = CapacitySeries::new("D", xs, ys).unwrap();
        let gp = GpForecaster { kernel: Kernel::se(), mean: MeanKind::Expdeg, config: TrainConfig { n_restarts: 3, ..Default::default() } };
        let fitted = gp.fit(&series, 1, None).unwrap();
        let f = forecast_eol(fitted.as_ref(), &series, 0.6, 200.0).unwrap().forecast;
        let (lo, hi) = (f.eol_lower.unwrap(), f.eol_upper.unwrap());
        assert!(lo.is_finite() && f.eol_mean.is_finite() && hi.is_finite(), "{f:?}");
        assert!(lo <= f.eol_mean && f.eol_mean <= hi);
        assert!(lo > 59.0);
        assert!((f.eol_mean - 200.0 / 3.0).abs() < 3.0, "{f:?}");

        // threshold above the current capacity crosses at the first grid point
        let f = forecast_eol(fitted.as_ref(), &series, 0.99, 200.0).unwrap().forecast;
        assert_eq!(f.eol_mean, 60.0);
    }

    #[test]
    fn ar_is_exact_on_linear_and_constant_series() {
        let f = ar_baseline(&linear(40), 10, 25).unwrap();
        for (k, v) in f.iter().enumerate() {
            let x = 40.0 + k as f64;
            assert!((v - (1.0 - 0.005 * x)).abs() < 1e-9, "{k}: {v}");
        }
        let flat = CapacitySeries::new("C", (0..20).map(f64::from).collect(), vec![1.5; 20]).unwrap();
        let f = ar_baseline(&flat, 3, 7).unwrap();
        assert!(f.iter().all(|v| (v - 1.0).abs() < 1e-12), "{f:?}");
        assert!(matches!(ar_baseline(&linear(10), 10, 1), Err(Error::DegenerateInput(_))));
    }

    #[test]
    fn ar_forecaster_predicts_by_step() {
        let fitted = ArForecaster { order: 2 }.fit(&linear(30), 0, None).unwrap();
        let p = fitted.predict(&[35.0, 30.0]).unwrap();
        assert!((p.mean[0] - (1.0 - 0.005 * 35.0)).abs() < 1e-9);
        assert!(p.sigma.is_none());
        assert!(fitted.predict(&[29.0]).is_err());
    }

    #[test]
    fn horizon_zero_is_rejected() {
        let series = linear(50);
        let ar = ArForecaster { order: 3 };
        assert!(matches!(lookahead(&series, &ar, &[0, 5], &SweepConfig::default()), Err(Error::Config(_))));
    }

    #[test]
    fn failures_are_recorded_not_fatal() {
        let series = linear(30);
        let ar = ArForecaster { order: 8 };
        let cfg = SweepConfig { start_fraction: 0.1, eol_threshold: 0.9, ..Default::default() };
        let report = evaluate(&series, &ar, &cfg, &[]).unwrap();
        assert_eq!(report.true_eol, Some(20.0));
        // c = 3..=8 have too little history
        assert_eq!(report.n_failed, 6);
        assert_eq!(report.records.len(), 27);
        assert!(report.rmse_eol.is_some());
    }

    #[test]
    fn lookahead_error_grows_with_horizon() {
        let xs: Vec<f64> = (0..80).map(f64::from).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let ys: Vec<f64> = xs.iter().map(|x| 1.0 - 0.3 * (x / 80.0f64).powi(2) + rng.gen_range(-0.002..0.002)).collect();
        let series = CapacitySeries::new("M", xs, ys).unwrap();
        let gp = GpForecaster { kernel: Kernel::se(), mean: MeanKind::Const, config: TrainConfig { n_restarts: 2, ..Default::default() } };
        let cfg = SweepConfig { start_fraction: 0.5, warm_start: true, ..Default::default() };
        let report = lookahead(&series, &gp, &[1, 5, 10], &cfg).unwrap();
        let r: Vec<f64> = report.horizons.iter().map(|h| h.rmse.unwrap()).collect();
        assert!(r[0] <= r[1] && r[1] <= r[2], "{r:?}");
        assert_eq!(report.horizons[2].skipped, 9);
    }

    #[test]
    fn evaluation_is_deterministic_across_thread_counts() {
        let xs: Vec<f64> = (0..40).map(f64::from).collect();
        let ys: Vec<f64> = xs.iter().map(|x| 1.0 - 0.01 * x + 0.003 * (x * 0.9).sin()).collect();
        let series = CapacitySeries::new("T", xs, ys).unwrap();
        let gp = GpForecaster { kernel: Kernel::se(), mean: MeanKind::Const, config: TrainConfig { n_restarts: 2, ..Default::default() } };
        let cfg = SweepConfig { start_fraction: 0.8, ..Default::default() };
        let one = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let four = rayon::ThreadPoolBuilder::new().num_threads(4).build().unwrap();
        let a = one.install(|| evaluate(&series, &gp, &cfg, &[2]).unwrap());
        let b = four.install(|| evaluate(&series, &gp, &cfg, &[2]).unwrap());
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
    }

    #[test]
    fn infinite_eol_survives_json() {
        let f = EolForecast {
            current: 3,
            current_x: 3.0,
            eol_mean: f64::INFINITY,
            eol_lower: Some(10.0),
            eol_upper: Some(f64::INFINITY),
            eol_scored: 20.0,
            clamped: true,
        };
        let json = serde_json::to_string(&f).unwrap();
        assert!(json.contains("\"inf\""));
        assert_eq!(serde_json::from_str::<EolForecast>(&json).unwrap(), f);
    }

    #[test]
    fn mogp_puts_target_last() {
        let aux = CapacitySeries::new("A", vec![0.0, 1.0, 2.0, 3.0], vec![1.0, 0.9, 0.8, 0.7]).unwrap();
        let target = CapacitySeries::new("T", vec![0.0, 1.5], vec![1.0, 0.88]).unwrap();
        let f = MogpForecaster { kernel: Kernel::se(), auxiliary: vec![aux], mean: MeanKind::Const, config: TrainConfig::default() };
        let m = f.build(&target).unwrap();
        assert_eq!(m.inputs().len(), 6);
        assert_eq!(m.inputs()[5], LabeledInput::new(1.5, 2));
        assert_eq!(m.kernel().to_string(), "LABEL2*SE");
    }
}
