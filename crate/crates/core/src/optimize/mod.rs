//! Maximum-likelihood training with Latin-hypercube restarts, and the
//! exhaustive search over sums of two base kernels.

pub mod lbfgs;

use std::f64::consts::PI;
use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::CapacitySeries;
use crate::error::{Error, Result};
use crate::gp::{variance, GpModel, ParamRole};
use crate::kernels::{Kernel, KernelSpec, Role};
use crate::linalg::lstsq_min_norm;
use crate::meanfn::{MeanFunction, MeanKind};
use lbfgs::{minimize, LbfgsConfig};

/// Optimizer-box margin around the sampling bounds of log-scale parameters.
const LOG_MARGIN: f64 = 4.605_170_185_988_091; // ln(100)

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub n_restarts: usize,
    pub max_iterations: usize,
    pub gradient_tolerance: f64,
    pub seed: u64,
    /// Raw-space sampling bounds per trainable parameter, overriding the
    /// data-scaled defaults. Entries for mean parameters are box bounds.
    pub bounds: Option<Vec<(f64, f64)>>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { n_restarts: 10, max_iterations: 200, gradient_tolerance: 1e-6, seed: 0, bounds: None }
    }
}

impl TrainConfig {
    pub fn with_seed(&self, seed: u64) -> Self {
        Self { seed, ..self.clone() }
    }
}

/// Independent stream seed for work unit `unit` under `base`.
pub fn derive_seed(base: u64, unit: u64) -> u64 {
    let mut z = base ^ unit.wrapping_add(1).wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

struct Scale {
    x_range: f64,
    y_std: f64,
    y_mag: f64,
}

fn data_scale(model: &GpModel) -> Scale {
    let (lo, hi) = model.inputs().iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), p| (a.min(p.x), b.max(p.x)));
    let x_range = if hi > lo { hi - lo } else { 1.0 };
    let y = model.targets();
    let y_mag = y.iter().fold(1.0f64, |a, v| a.max(v.abs()));
    let y_std = variance(y).sqrt().max(1e-3 * y_mag);
    Scale { x_range, y_std, y_mag }
}

/// Default raw-space sampling bounds, in
/// [`GpModel::parameter_names`] order.
pub fn default_bounds(model: &GpModel) -> Vec<(f64, f64)> {
    let s = data_scale(model);
    model
        .parameter_roles()
        .into_iter()
        .map(|role| match role {
            ParamRole::Kernel(Role::OutputScale) => (0.01 * s.y_std, 10.0 * s.y_std),
            ParamRole::Kernel(Role::LengthScale) => (0.1 * s.x_range, 10.0 * s.x_range),
            ParamRole::Kernel(Role::PeriodicLengthScale) => (0.1, 10.0),
            ParamRole::Kernel(Role::Period) => (0.1 * s.x_range, 2.0 * s.x_range),
            ParamRole::Kernel(Role::NoiseScale) => (1e-4 * s.y_std, 0.5 * s.y_std),
            ParamRole::Kernel(Role::LabelScale) => (0.1, 10.0),
            ParamRole::Kernel(Role::Angle) => (0.0, PI),
            ParamRole::Noise => ((1e-4 * s.y_std).powi(2), (0.5 * s.y_std).powi(2)),
            ParamRole::Mean(_) => mean_box(model, role, &s),
        })
        .collect()
}

fn mean_box(model: &GpModel, role: ParamRole, s: &Scale) -> (f64, f64) {
    let wide = (-10.0 * s.y_mag, 10.0 * s.y_mag);
    match (model.mean(), role) {
        (MeanFunction::ExpDegradation { trainable, .. }, ParamRole::Mean(j)) => {
            let which = (0..3).filter(|&i| trainable[i]).nth(j).unwrap_or(0);
            if which == 2 {
                (-50.0 / s.x_range, 50.0 / s.x_range)
            } else {
                wide
            }
        }
        _ => wide,
    }
}

fn is_log(role: ParamRole) -> bool {
    matches!(role, ParamRole::Noise) || matches!(role, ParamRole::Kernel(r) if r != Role::Angle)
}

/// `n` points in the box, one per row, stratified in every dimension.
pub fn latin_hypercube(bounds: &[(f64, f64)], n: usize, rng: &mut impl Rng) -> Vec<Vec<f64>> {
    let mut out = vec![vec![0.0; bounds.len()]; n];
    for (d, (lo, hi)) in bounds.iter().enumerate() {
        let mut bins: Vec<usize> = (0..n).collect();
        bins.shuffle(rng);
        for (row, bin) in out.iter_mut().zip(bins) {
            let u = (bin as f64 + rng.gen::<f64>()) / n as f64;
            row[d] = lo + u * (hi - lo);
        }
    }
    out
}

/// Least-squares `a1, a2` for a fixed decay rate `a3`.
fn fit_linear_part(xs: &[f64], ys: &[f64], a3: f64) -> Option<(f64, f64)> {
    let a = DMatrix::from_fn(xs.len(), 2, |i, j| if j == 0 { 1.0 } else { (a3 * xs[i]).exp() });
    let b = DVector::from_column_slice(ys);
    let sol = lstsq_min_norm(&a, &b);
    sol.iter().all(|v| v.is_finite()).then(|| (sol[0], sol[1]))
}

/// Starting values for trainable mean parameters. Exponential means get two
/// candidates, decaying and growing, with the linear part pre-fitted.
fn mean_starts(model: &GpModel, x_range: f64) -> Vec<Vec<f64>> {
    let base: Vec<f64> = model.mean().trainable().into_iter().map(|(_, v)| v).collect();
    let MeanFunction::ExpDegradation { params, trainable } = model.mean() else {
        return vec![base];
    };
    let xs: Vec<f64> = model.inputs().iter().map(|p| p.x).collect();
    let mut starts = Vec::new();
    for a3 in [-1.0 / x_range, 1.0 / x_range] {
        let mut p = *params;
        if trainable[2] {
            p[2] = a3;
        }
        if let Some((a1, a2)) = fit_linear_part(&xs, model.targets(), p[2]) {
            if trainable[0] {
                p[0] = a1;
            }
            if trainable[1] {
                p[1] = a2;
            }
        }
        starts.push((0..3).filter(|&i| trainable[i]).map(|i| p[i]).collect());
    }
    starts
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RestartDiagnostics {
    pub start_nlml: Option<f64>,
    pub final_nlml: Option<f64>,
    pub iterations: usize,
    pub evaluations: usize,
    pub converged: bool,
    pub warm: bool,
    pub error: Option<String>,
}

#[derive(Debug, Clone)]
pub struct TrainResult {
    pub model: GpModel,
    pub nlml: f64,
    pub restarts: Vec<RestartDiagnostics>,
}

pub fn train(model: &GpModel, config: &TrainConfig) -> Result<TrainResult> {
    train_from(model, config, None)
}

/// Like [`train`], with `warm` (free-space parameters of an earlier fit)
/// taking the place of the first sampled start.
pub fn train_from(model: &GpModel, config: &TrainConfig, warm: Option<&[f64]>) -> Result<TrainResult> {
    if model.inputs().len() < 2 {
        return Err(Error::DegenerateInput("training needs at least two observations".into()));
    }
    if config.n_restarts == 0 {
        return Err(Error::Config("at least one restart is required".into()));
    }
    let roles = model.parameter_roles();
    let dim = roles.len();
    let bounds = match &config.bounds {
        Some(b) if b.len() != dim => {
            return Err(Error::Config(format!("{} bounds given for {dim} trainable parameters", b.len())))
        }
        Some(b) => b.clone(),
        None => default_bounds(model),
    };
    for (i, (lo, hi)) in bounds.iter().enumerate() {
        let bad = !(lo.is_finite() && hi.is_finite() && lo <= hi) || (is_log(roles[i]) && *lo <= 0.0);
        if bad {
            return Err(Error::Config(format!("invalid bounds [{lo}, {hi}] for parameter {i}")));
        }
    }
    let scale = data_scale(model);

    // sampling box and optimizer box in free space
    let free_bounds: Vec<(f64, f64)> = bounds
        .iter()
        .zip(&roles)
        .map(|(&(lo, hi), r)| if is_log(*r) { (lo.ln(), hi.ln()) } else { (lo, hi) })
        .collect();
    let (lower, upper): (Vec<f64>, Vec<f64>) = free_bounds
        .iter()
        .zip(&roles)
        .map(|(&(lo, hi), r)| match r {
            ParamRole::Mean(_) => (lo, hi),
            ParamRole::Kernel(Role::Angle) => (lo - PI, hi + PI),
            _ => (lo - LOG_MARGIN, hi + LOG_MARGIN),
        })
        .unzip();

    // decay rates are rescaled so all coordinates are of order one
    let unit: Vec<f64> = roles
        .iter()
        .enumerate()
        .map(|(i, r)| match r {
            ParamRole::Mean(_) if upper[i] - lower[i] < 1.0 => 1.0 / scale.x_range,
            _ => 1.0,
        })
        .collect();
    let to_z = |x: &[f64]| -> Vec<f64> { x.iter().zip(&unit).map(|(v, u)| v / u).collect() };
    let lower_z = to_z(&lower);
    let upper_z = to_z(&upper);

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let kernel_dims: Vec<usize> = (0..dim).filter(|&i| !matches!(roles[i], ParamRole::Mean(_))).collect();
    let sample_box: Vec<(f64, f64)> = kernel_dims.iter().map(|&i| free_bounds[i]).collect();
    let samples = latin_hypercube(&sample_box, config.n_restarts, &mut rng);
    let means = mean_starts(model, scale.x_range);

    let mut starts: Vec<(Vec<f64>, bool)> = samples
        .into_iter()
        .enumerate()
        .map(|(r, sample)| {
            let mut x = vec![0.0; dim];
            for (k, &i) in kernel_dims.iter().enumerate() {
                x[i] = sample[k];
            }
            let mean = &means[r % means.len()];
            let mut m = mean.iter();
            for (i, role) in roles.iter().enumerate() {
                if let ParamRole::Mean(_) = role {
                    x[i] = *m.next().unwrap();
                }
            }
            (x, false)
        })
        .collect();
    if let Some(w) = warm {
        if w.len() != dim {
            return Err(Error::Config(format!("warm start has {} values for {dim} parameters", w.len())));
        }
        starts[0] = (w.to_vec(), true);
    }

    let lbfgs = LbfgsConfig {
        max_iterations: config.max_iterations,
        gradient_tolerance: config.gradient_tolerance,
        ..Default::default()
    };
    let mut work = model.clone();
    let mut best: Option<(f64, Vec<f64>)> = None;
    let mut diagnostics = Vec::with_capacity(starts.len());
    for (x0, warm) in starts {
        let mut last_error = None;
        let mut start_nlml = None;
        let objective = |z: &[f64]| -> Option<(f64, Vec<f64>)> {
            let x: Vec<f64> = z.iter().zip(&unit).map(|(v, u)| v * u).collect();
            let res = work.set_free_parameters(&x).and_then(|_| work.nlml_and_gradients());
            match res {
                Ok((f, g)) => {
                    start_nlml.get_or_insert(f);
                    Some((f, g.iter().zip(&unit).map(|(d, u)| d * u).collect()))
                }
                Err(e) => {
                    last_error = Some(e.to_string());
                    None
                }
            }
        };
        let outcome = minimize(objective, &to_z(&x0), &lower_z, &upper_z, &lbfgs);
        match outcome {
            Some(o) => {
                let x: Vec<f64> = o.x.iter().zip(&unit).map(|(v, u)| v * u).collect();
                diagnostics.push(RestartDiagnostics {
                    start_nlml,
                    final_nlml: Some(o.f),
                    iterations: o.iterations,
                    evaluations: o.evaluations,
                    converged: o.converged,
                    warm,
                    error: None,
                });
                if best.as_ref().is_none_or(|(f, _)| o.f < *f) {
                    best = Some((o.f, x));
                }
            }
            None => diagnostics.push(RestartDiagnostics {
                start_nlml: None,
                final_nlml: None,
                iterations: 0,
                evaluations: 1,
                converged: false,
                warm,
                error: Some(last_error.unwrap_or_else(|| "non-finite objective at start".into())),
            }),
        }
    }

    let Some((_, x)) = best else {
        return Err(Error::Training(diagnostics.into_iter().filter_map(|d| d.error).collect()));
    };
    let mut fitted = model.clone();
    fitted.set_free_parameters(&x)?;
    fitted.kernel_mut().canonicalize();
    let nlml = fitted.nlml()?;
    Ok(TrainResult { model: fitted, nlml, restarts: diagnostics })
}

/// The candidate set: every sum `bases[i] + bases[j]` with `i <= j`.
pub fn candidate_kernels(bases: &[Kernel]) -> Vec<Kernel> {
    let mut out = Vec::new();
    for i in 0..bases.len() {
        for j in i..bases.len() {
            out.push(Kernel::sum(bases[i].clone(), bases[j].clone()));
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchEntry {
    pub rank: usize,
    pub candidate: usize,
    pub expression: String,
    /// Log marginal likelihood at the optimum; absent when training failed.
    pub lml: Option<f64>,
    pub kernel: Option<KernelSpec>,
    pub mean: Option<MeanFunction>,
    pub noise_variance: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelSearchResult {
    pub cell_id: String,
    pub entries: Vec<SearchEntry>,
}

impl KernelSearchResult {
    pub fn best(&self) -> Option<&SearchEntry> {
        self.entries.first().filter(|e| e.lml.is_some())
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["rank", "candidate", "kernel", "lml", "noise_variance", "error"])?;
        for e in &self.entries {
            w.write_record([
                e.rank.to_string(),
                e.candidate.to_string(),
                e.expression.clone(),
                e.lml.map(|v| v.to_string()).unwrap_or_default(),
                e.noise_variance.map(|v| v.to_string()).unwrap_or_default(),
                e.error.clone().unwrap_or_default(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Trains every candidate on `series` and ranks them by marginal likelihood.
///
/// Candidates run in parallel on the current rayon pool; each uses its own
/// seed, so the ranking does not depend on the number of threads.
pub fn kernel_search(
    series: &CapacitySeries,
    bases: &[Kernel],
    mean: MeanKind,
    config: &TrainConfig,
) -> Result<KernelSearchResult> {
    if bases.is_empty() {
        return Err(Error::Config("kernel search needs at least one base kernel".into()));
    }
    let candidates = candidate_kernels(bases);
    let mut entries: Vec<SearchEntry> = candidates
        .par_iter()
        .enumerate()
        .map(|(i, kernel)| {
            let cfg = config.with_seed(derive_seed(config.seed, i as u64));
            let fitted = GpModel::from_series(kernel.clone(), mean, series).and_then(|m| train(&m, &cfg));
            let expression = kernel.to_string();
            match fitted {
                Ok(t) => SearchEntry {
                    rank: 0,
                    candidate: i,
                    expression,
                    lml: Some(-t.nlml),
                    kernel: Some(t.model.kernel().to_spec()),
                    mean: Some(t.model.mean().clone()),
                    noise_variance: Some(t.model.noise_variance()),
                    error: None,
                },
                Err(e) => SearchEntry {
                    rank: 0,
                    candidate: i,
                    expression,
                    lml: None,
                    kernel: None,
                    mean: None,
                    noise_variance: None,
                    error: Some(e.to_string()),
                },
            }
        })
        .collect();
    entries.sort_by(|a, b| {
        let ka = a.lml.unwrap_or(f64::NEG_INFINITY);
        let kb = b.lml.unwrap_or(f64::NEG_INFINITY);
        kb.total_cmp(&ka).then(a.candidate.cmp(&b.candidate))
    });
    for (r, e) in entries.iter_mut().enumerate() {
        e.rank = r + 1;
    }
    Ok(KernelSearchResult { cell_id: series.cell_id().to_string(), entries })
}
