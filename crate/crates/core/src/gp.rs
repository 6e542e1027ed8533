//! Exact Gaussian-process inference.
//!
//! The training covariance `K + sigma^2 I` is factorized once per
//! [`Conditioned`] state; the negative log marginal likelihood, its
//! gradients, the posterior and the per-summand decomposition all reuse that
//! factor.

use std::collections::BTreeSet;
use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dataset::CapacitySeries;
use crate::error::{Error, Result};
use crate::kernels::{Kernel, KernelSpec, LabeledInput, Role};
use crate::linalg::{factorize, Factor, JitterPolicy};
use crate::meanfn::{MeanFunction, MeanKind};

pub const NOISE_PARAM: &str = "noise.variance";

/// What a trainable model parameter is, for choosing search bounds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamRole {
    Kernel(Role),
    /// Log of the observation noise variance.
    Noise,
    /// Index into the mean function's trainable parameters.
    Mean(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct GpModel {
    kernel: Kernel,
    mean: MeanFunction,
    noise_variance: f64,
    noise_trainable: bool,
    fixed: BTreeSet<String>,
    inputs: Vec<LabeledInput>,
    targets: Vec<f64>,
    jitter: JitterPolicy,
}

impl GpModel {
    pub fn new(
        kernel: Kernel,
        mean: MeanFunction,
        noise_variance: f64,
        inputs: Vec<LabeledInput>,
        targets: Vec<f64>,
    ) -> Result<Self> {
        if inputs.len() != targets.len() {
            return Err(Error::Config(format!(
                "{} inputs but {} targets",
                inputs.len(),
                targets.len()
            )));
        }
        if inputs.is_empty() {
            return Err(Error::DegenerateInput("model has no training data".into()));
        }
        if !(noise_variance > 0.0 && noise_variance.is_finite()) {
            return Err(Error::Config(format!("noise variance {noise_variance} must be positive")));
        }
        if let Some(m) = kernel.outputs() {
            if let Some(p) = inputs.iter().find(|p| p.label == 0 || p.label > m) {
                return Err(Error::Bounds(format!("label {} outside 1..={m}", p.label)));
            }
        }
        Ok(Self {
            kernel,
            mean,
            noise_variance,
            noise_trainable: true,
            fixed: BTreeSet::new(),
            inputs,
            targets,
            jitter: JitterPolicy::default(),
        })
    }

    /// Single-output model on a capacity series, mean initialized from the data.
    pub fn from_series(kernel: Kernel, mean: MeanKind, series: &CapacitySeries) -> Result<Self> {
        let mean = mean.initialize(series.cycles(), series.capacities())?;
        let var = variance(series.capacities()).max(1e-8);
        Self::new(
            kernel,
            mean,
            1e-2 * var,
            LabeledInput::single(series.cycles()),
            series.capacities().to_vec(),
        )
    }

    pub fn kernel(&self) -> &Kernel {
        &self.kernel
    }

    pub fn kernel_mut(&mut self) -> &mut Kernel {
        &mut self.kernel
    }

    pub fn mean(&self) -> &MeanFunction {
        &self.mean
    }

    pub fn mean_mut(&mut self) -> &mut MeanFunction {
        &mut self.mean
    }

    pub fn noise_variance(&self) -> f64 {
        self.noise_variance
    }

    pub fn set_noise_variance(&mut self, v: f64) {
        self.noise_variance = v;
    }

    pub fn set_noise_trainable(&mut self, trainable: bool) {
        self.noise_trainable = trainable;
    }

    pub fn inputs(&self) -> &[LabeledInput] {
        &self.inputs
    }

    pub fn targets(&self) -> &[f64] {
        &self.targets
    }

    pub fn jitter(&self) -> JitterPolicy {
        self.jitter
    }

    pub fn set_jitter(&mut self, policy: JitterPolicy) {
        self.jitter = policy;
    }

    /// Excludes a kernel hyperparameter from training.
    pub fn fix(&mut self, name: &str) -> Result<()> {
        if !self.kernel.hyperparameters().iter().any(|h| h.name == name) {
            return Err(Error::Config(format!("no kernel hyperparameter named `{name}`")));
        }
        self.fixed.insert(name.to_string());
        Ok(())
    }

    /// Names of trainable parameters: kernel (free space), log noise variance, mean.
    pub fn parameter_names(&self) -> Vec<String> {
        let mut names: Vec<String> = self
            .kernel
            .hyperparameters()
            .into_iter()
            .filter(|h| !self.fixed.contains(&h.name))
            .map(|h| h.name)
            .collect();
        if self.noise_trainable {
            names.push(NOISE_PARAM.to_string());
        }
        names.extend(self.mean.trainable().into_iter().map(|(n, _)| n));
        names
    }

    pub fn parameter_roles(&self) -> Vec<ParamRole> {
        let mut roles: Vec<ParamRole> = self
            .kernel
            .hyperparameters()
            .into_iter()
            .filter(|h| !self.fixed.contains(&h.name))
            .map(|h| ParamRole::Kernel(h.role))
            .collect();
        if self.noise_trainable {
            roles.push(ParamRole::Noise);
        }
        roles.extend((0..self.mean.n_trainable()).map(ParamRole::Mean));
        roles
    }

    fn kernel_mask(&self) -> Vec<bool> {
        self.kernel.hyperparameters().iter().map(|h| !self.fixed.contains(&h.name)).collect()
    }

    /// Trainable parameters in optimizer space.
    pub fn free_parameters(&self) -> Vec<f64> {
        let mut out: Vec<f64> = self
            .kernel
            .hyperparameters()
            .iter()
            .filter(|h| !self.fixed.contains(&h.name))
            .map(|h| h.free_value())
            .collect();
        if self.noise_trainable {
            out.push(self.noise_variance.ln());
        }
        out.extend(self.mean.trainable().into_iter().map(|(_, v)| v));
        out
    }

    pub fn set_free_parameters(&mut self, values: &[f64]) -> Result<()> {
        let names = self.parameter_names();
        if values.len() != names.len() {
            return Err(Error::Config(format!(
                "model has {} trainable parameters, got {}",
                names.len(),
                values.len()
            )));
        }
        let mask = self.kernel_mask();
        let mut kernel_free = self.kernel.free_values();
        let mut it = values.iter();
        for (v, trainable) in kernel_free.iter_mut().zip(&mask) {
            if *trainable {
                *v = *it.next().unwrap();
            }
        }
        self.kernel.set_free_values(&kernel_free)?;
        if self.noise_trainable {
            self.noise_variance = it.next().unwrap().exp();
        }
        let rest: Vec<f64> = it.copied().collect();
        self.mean.set_trainable(&rest)
    }

    fn xs(&self) -> Vec<f64> {
        self.inputs.iter().map(|p| p.x).collect()
    }

    fn residual(&self) -> Result<DVector<f64>> {
        let m = self.mean.eval(&self.xs())?;
        Ok(DVector::from_iterator(self.targets.len(), self.targets.iter().zip(m).map(|(y, m)| y - m)))
    }

    fn factor_train(&self, mut k: DMatrix<f64>) -> Result<Factor> {
        for i in 0..k.nrows() {
            k[(i, i)] += self.noise_variance;
        }
        factorize(&k, &self.jitter)
    }

    /// Factorizes the training covariance.
    pub fn condition(&self) -> Result<Conditioned<'_>> {
        let k = self.kernel.gram(&self.inputs, None)?;
        let factor = self.factor_train(k)?;
        let residual = self.residual()?;
        let alpha = factor.chol.solve(&residual);
        Ok(Conditioned { model: self, factor, alpha, residual })
    }

    pub fn nlml(&self) -> Result<f64> {
        Ok(self.condition()?.nlml())
    }

    /// NLML and its gradient w.r.t. [`free_parameters`](Self::free_parameters).
    pub fn nlml_and_gradients(&self) -> Result<(f64, Vec<f64>)> {
        let (k, dks) = self.kernel.gram_with_gradients(&self.inputs)?;
        let factor = self.factor_train(k)?;
        let residual = self.residual()?;
        let alpha = factor.chol.solve(&residual);
        let state = Conditioned { model: self, factor, alpha, residual };
        let nlml = state.nlml();

        let inv = state.factor.chol.inverse();
        let alpha = &state.alpha;
        let n = alpha.len();
        // d NLML / d theta = 1/2 tr((K^-1 - alpha alpha^T) dK)
        let trace_term = |dk: &DMatrix<f64>| -> f64 {
            let mut acc = 0.0;
            for j in 0..n {
                for i in 0..n {
                    acc += (inv[(i, j)] - alpha[i] * alpha[j]) * dk[(i, j)];
                }
            }
            0.5 * acc
        };
        let mut grads: Vec<f64> = dks
            .iter()
            .zip(self.kernel_mask())
            .filter(|(_, m)| *m)
            .map(|(dk, _)| trace_term(dk))
            .collect();
        if self.noise_trainable {
            let tr = inv.trace();
            grads.push(0.5 * self.noise_variance * (tr - alpha.dot(alpha)));
        }
        let g = self.mean.gradients(&self.xs());
        grads.extend((0..g.ncols()).map(|j| -g.column(j).dot(alpha)));
        Ok((nlml, grads))
    }

    /// Named gradient vector; fixed parameters are absent.
    pub fn nlml_gradients(&self) -> Result<Vec<(String, f64)>> {
        let (_, g) = self.nlml_and_gradients()?;
        Ok(self.parameter_names().into_iter().zip(g).collect())
    }

    pub fn posterior(&self, test: &[LabeledInput]) -> Result<Posterior> {
        self.condition()?.posterior(test)
    }

    /// Posterior at single-output (label 1) or labelled test points.
    pub fn posterior_x(&self, xs: &[f64], label: usize) -> Result<Posterior> {
        let test: Vec<LabeledInput> = xs.iter().map(|&x| LabeledInput::new(x, label)).collect();
        self.posterior(&test)
    }

    pub fn decompose_posterior(&self, test: &[LabeledInput]) -> Result<Posterior> {
        self.condition()?.decompose(test)
    }

    /// `n_samples` joint draws of the latent function at `test` (rows are draws).
    pub fn sample_posterior(&self, test: &[LabeledInput], n_samples: usize, seed: u64) -> Result<DMatrix<f64>> {
        self.condition()?.sample(test, n_samples, seed)
    }

    pub fn summary(&self) -> Result<ModelSummary> {
        Ok(ModelSummary {
            kernel: self.kernel.to_spec(),
            mean: self.mean.clone(),
            noise_variance: self.noise_variance,
            nlml: self.nlml()?,
            n_train: self.inputs.len(),
        })
    }
}

/// Serializable snapshot of a fitted model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSummary {
    pub kernel: KernelSpec,
    pub mean: MeanFunction,
    pub noise_variance: f64,
    pub nlml: f64,
    pub n_train: usize,
}

/// A model with its training covariance factorized.
pub struct Conditioned<'a> {
    model: &'a GpModel,
    factor: Factor,
    alpha: DVector<f64>,
    residual: DVector<f64>,
}

impl Conditioned<'_> {
    pub fn jitter(&self) -> f64 {
        self.factor.jitter
    }

    pub fn nlml(&self) -> f64 {
        let n = self.residual.len() as f64;
        0.5 * self.residual.dot(&self.alpha) + 0.5 * self.factor.log_det() + 0.5 * n * (2.0 * PI).ln()
    }

    fn test_mean(&self, test: &[LabeledInput]) -> Result<Vec<f64>> {
        let xs: Vec<f64> = test.iter().map(|p| p.x).collect();
        self.model.mean.eval(&xs)
    }

    /// Mean contribution and latent variance of `kernel` at `test`, given
    /// the training covariance of the full model.
    fn project(&self, kernel: &Kernel, test: &[LabeledInput]) -> Result<(Vec<f64>, Vec<f64>)> {
        let ks = kernel.gram(&self.model.inputs, Some(test))?;
        let mean = ks.tr_mul(&self.alpha);
        let v = self
            .factor
            .chol
            .l_dirty()
            .solve_lower_triangular(&ks)
            .ok_or(Error::Numerical { jitter: self.factor.jitter, condition: f64::INFINITY })?;
        let prior = kernel.diag(test)?;
        let var = prior
            .iter()
            .enumerate()
            .map(|(j, p)| {
                let reduced = p - v.column(j).norm_squared();
                debug_assert!(reduced >= -1e-10 * p.abs().max(1.0), "variance {reduced}");
                reduced.max(0.0)
            })
            .collect();
        Ok((mean.iter().copied().collect(), var))
    }

    pub fn posterior(&self, test: &[LabeledInput]) -> Result<Posterior> {
        let prior_mean = self.test_mean(test)?;
        let (delta, var) = self.project(&self.model.kernel, test)?;
        Ok(Posterior {
            test_inputs: test.to_vec(),
            mean: prior_mean.iter().zip(&delta).map(|(m, d)| m + d).collect(),
            latent_variance: var,
            noise_variance: self.model.noise_variance,
            components: None,
        })
    }

    /// Posterior split into one component per additive kernel term, plus
    /// the observation noise. Component means and the prior mean add up to
    /// the total posterior mean.
    pub fn decompose(&self, test: &[LabeledInput]) -> Result<Posterior> {
        let mut post = self.posterior(test)?;
        let mut components = Vec::new();
        for (i, part) in self.model.kernel.summands().iter().enumerate() {
            let (mean, variance) = self.project(part, test)?;
            components.push(Component { name: format!("{i}:{part}"), mean, variance });
        }
        components.push(Component {
            name: "noise".into(),
            mean: vec![0.0; test.len()],
            variance: vec![self.model.noise_variance; test.len()],
        });
        post.components = Some(components);
        Ok(post)
    }

    /// Full latent posterior covariance at `test`.
    pub fn covariance(&self, test: &[LabeledInput]) -> Result<DMatrix<f64>> {
        let ks = self.model.kernel.gram(&self.model.inputs, Some(test))?;
        let v = self
            .factor
            .chol
            .l_dirty()
            .solve_lower_triangular(&ks)
            .ok_or(Error::Numerical { jitter: self.factor.jitter, condition: f64::INFINITY })?;
        let mut cov = self.model.kernel.gram(test, None)? - v.tr_mul(&v);
        // restore exact symmetry
        for j in 0..cov.ncols() {
            for i in 0..j {
                let s = 0.5 * (cov[(i, j)] + cov[(j, i)]);
                cov[(i, j)] = s;
                cov[(j, i)] = s;
            }
        }
        Ok(cov)
    }

    pub fn sample(&self, test: &[LabeledInput], n_samples: usize, seed: u64) -> Result<DMatrix<f64>> {
        let t = test.len();
        if n_samples == 0 {
            return Ok(DMatrix::zeros(0, t));
        }
        let post = self.posterior(test)?;
        let cov = self.covariance(test)?;
        let l = factorize(&cov, &self.model.jitter)?.l();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = DMatrix::zeros(n_samples, t);
        let mut z = DVector::zeros(t);
        for s in 0..n_samples {
            for v in z.iter_mut() {
                *v = StandardNormal.sample(&mut rng);
            }
            let draw = &l * &z;
            for j in 0..t {
                out[(s, j)] = post.mean[j] + draw[j];
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Component {
    pub name: String,
    pub mean: Vec<f64>,
    pub variance: Vec<f64>,
}

/// Predictive distribution at a set of test inputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Posterior {
    pub test_inputs: Vec<LabeledInput>,
    pub mean: Vec<f64>,
    /// Variance of the latent function, without observation noise.
    pub latent_variance: Vec<f64>,
    pub noise_variance: f64,
    pub components: Option<Vec<Component>>,
}

impl Posterior {
    pub fn variance(&self, include_noise: bool) -> Vec<f64> {
        let extra = if include_noise { self.noise_variance } else { 0.0 };
        self.latent_variance.iter().map(|v| v + extra).collect()
    }

    pub fn std_dev(&self, include_noise: bool) -> Vec<f64> {
        self.variance(include_noise).into_iter().map(f64::sqrt).collect()
    }

    /// `mean -/+ 2 sd`, including observation noise.
    pub fn credible_bounds(&self) -> (Vec<f64>, Vec<f64>) {
        let sd = self.std_dev(true);
        let lower = self.mean.iter().zip(&sd).map(|(m, s)| m - 2.0 * s).collect();
        let upper = self.mean.iter().zip(&sd).map(|(m, s)| m + 2.0 * s).collect();
        (lower, upper)
    }

    pub fn to_report(&self) -> PosteriorReport {
        let (lower, upper) = self.credible_bounds();
        PosteriorReport {
            x: self.test_inputs.iter().map(|p| p.x).collect(),
            label: self.test_inputs.iter().map(|p| p.label).collect(),
            mean: self.mean.clone(),
            lower,
            upper,
            latent_sd: self.std_dev(false),
            components: self.components.clone(),
        }
    }
}

/// JSON form of a [`Posterior`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosteriorReport {
    pub x: Vec<f64>,
    pub label: Vec<usize>,
    pub mean: Vec<f64>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub latent_sd: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub components: Option<Vec<Component>>,
}

pub(crate) fn variance(v: &[f64]) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    let m = v.iter().sum::<f64>() / v.len() as f64;
    v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / v.len() as f64
}
