//! Stationary covariance functions and their sums and products.
//!
//! A [`Kernel`] is an expression tree over the base kernels (squared
//! exponential, Matérn 3/2 and 5/2, periodic, white noise) plus a label
//! covariance used to couple the outputs of a multi-output model. Gram
//! matrices are built over [`LabeledInput`]s; base kernels only look at `x`,
//! the label covariance only at the label.
//!
//! Positive hyperparameters are exposed to optimizers in log space, angles
//! raw. All gradients returned here are with respect to those free values.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub mod label;

pub use label::LabelCovariance;

const SQRT3: f64 = 1.732_050_807_568_877_2;
const SQRT5: f64 = 2.236_067_977_499_79;

/// Matérn smoothness; only the half-integer closed forms are supported.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Smoothness {
    ThreeHalves,
    FiveHalves,
}

impl Smoothness {
    pub fn from_nu(nu: f64) -> Result<Self> {
        if nu == 1.5 {
            Ok(Smoothness::ThreeHalves)
        } else if nu == 2.5 {
            Ok(Smoothness::FiveHalves)
        } else {
            Err(Error::Config(format!("unsupported Matérn smoothness nu = {nu}; use 3/2 or 5/2")))
        }
    }

    pub fn nu(self) -> f64 {
        match self {
            Smoothness::ThreeHalves => 1.5,
            Smoothness::FiveHalves => 2.5,
        }
    }
}

/// A cycle (or time) value tagged with the output it belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LabeledInput {
    pub x: f64,
    /// 1-based output label.
    pub label: usize,
}

impl LabeledInput {
    pub fn new(x: f64, label: usize) -> Self {
        Self { x, label }
    }

    /// Single-output inputs, all labelled 1.
    pub fn single(xs: &[f64]) -> Vec<Self> {
        xs.iter().map(|&x| Self { x, label: 1 }).collect()
    }
}

/// Squared exponential, `theta_f^2 exp(-(x - x')^2 / theta_l^2)`.
///
/// Note there is no factor of two in the denominator.
pub fn eval_se(x: f64, x2: f64, output_scale: f64, length_scale: f64) -> f64 {
    let d = (x - x2) / length_scale;
    output_scale * output_scale * (-d * d).exp()
}

pub fn eval_matern(x: f64, x2: f64, sigma: f64, rho: f64, nu: Smoothness) -> f64 {
    let r = (x - x2).abs();
    let s2 = sigma * sigma;
    match nu {
        Smoothness::ThreeHalves => {
            let a = SQRT3 * r / rho;
            s2 * (1.0 + a) * (-a).exp()
        }
        Smoothness::FiveHalves => {
            let a = SQRT5 * r / rho;
            s2 * (1.0 + a + a * a / 3.0) * (-a).exp()
        }
    }
}

/// Periodic, `theta_f^2 exp(-(2 / theta_l^2) sin^2(pi (x - x') / p))`.
pub fn eval_periodic(x: f64, x2: f64, output_scale: f64, length_scale: f64, period: f64) -> f64 {
    let s = (PI * (x - x2) / period).sin();
    output_scale * output_scale * (-2.0 * s * s / (length_scale * length_scale)).exp()
}

/// How a hyperparameter maps to the optimizer's free value.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Transform {
    Log,
    Identity,
}

/// What a hyperparameter controls; used to pick data-scaled search bounds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Role {
    OutputScale,
    LengthScale,
    /// The dimensionless length scale of the periodic kernel.
    PeriodicLengthScale,
    Period,
    NoiseScale,
    LabelScale,
    Angle,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hyperparameter {
    pub name: String,
    /// Raw (not log) value.
    pub value: f64,
    pub transform: Transform,
    pub role: Role,
}

impl Hyperparameter {
    pub fn free_value(&self) -> f64 {
        match self.transform {
            Transform::Log => self.value.ln(),
            Transform::Identity => self.value,
        }
    }
}

fn from_free(transform: Transform, free: f64) -> f64 {
    match transform {
        Transform::Log => free.exp(),
        Transform::Identity => free,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Kernel {
    SquaredExponential { output_scale: f64, length_scale: f64 },
    Matern { nu: Smoothness, sigma: f64, rho: f64 },
    Periodic { output_scale: f64, length_scale: f64, period: f64 },
    WhiteNoise { sigma: f64 },
    LabelCov(LabelCovariance),
    Sum(Box<Kernel>, Box<Kernel>),
    Product(Box<Kernel>, Box<Kernel>),
}

impl Kernel {
    pub fn se() -> Self {
        Kernel::SquaredExponential { output_scale: 1.0, length_scale: 1.0 }
    }

    pub fn matern(nu: Smoothness) -> Self {
        Kernel::Matern { nu, sigma: 1.0, rho: 1.0 }
    }

    pub fn periodic() -> Self {
        Kernel::Periodic { output_scale: 1.0, length_scale: 1.0, period: 1.0 }
    }

    pub fn white_noise() -> Self {
        Kernel::WhiteNoise { sigma: 0.1 }
    }

    pub fn sum(left: Kernel, right: Kernel) -> Self {
        Kernel::Sum(Box::new(left), Box::new(right))
    }

    pub fn product(left: Kernel, right: Kernel) -> Self {
        Kernel::Product(Box::new(left), Box::new(right))
    }

    /// Left-folded sum; `None` for an empty list.
    pub fn sum_of(kernels: impl IntoIterator<Item = Kernel>) -> Option<Self> {
        kernels.into_iter().reduce(Kernel::sum)
    }

    /// `label_cov x input`, the multi-output covariance.
    pub fn coregionalized(labels: LabelCovariance, input: Kernel) -> Self {
        Kernel::product(Kernel::LabelCov(labels), input)
    }

    /// Additive terms, with products distributed over sums.
    pub fn summands(&self) -> Vec<Kernel> {
        match self {
            Kernel::Sum(l, r) => {
                let mut out = l.summands();
                out.extend(r.summands());
                out
            }
            Kernel::Product(l, r) => {
                let (ls, rs) = (l.summands(), r.summands());
                let mut out = Vec::with_capacity(ls.len() * rs.len());
                for a in &ls {
                    for b in &rs {
                        out.push(Kernel::product(a.clone(), b.clone()));
                    }
                }
                out
            }
            leaf => vec![leaf.clone()],
        }
    }

    /// Number of outputs required by any label covariance in the tree.
    pub fn outputs(&self) -> Option<usize> {
        match self {
            Kernel::LabelCov(lc) => Some(lc.outputs()),
            Kernel::Sum(l, r) | Kernel::Product(l, r) => match (l.outputs(), r.outputs()) {
                (Some(a), Some(b)) => Some(a.max(b)),
                (a, b) => a.or(b),
            },
            _ => None,
        }
    }

    /// Hyperparameters in traversal order (left to right).
    pub fn hyperparameters(&self) -> Vec<Hyperparameter> {
        let mut out = Vec::new();
        let mut leaf = 0;
        self.collect_params(&mut out, &mut leaf);
        out
    }

    fn collect_params(&self, out: &mut Vec<Hyperparameter>, leaf: &mut usize) {
        match self {
            Kernel::Sum(l, r) | Kernel::Product(l, r) => {
                l.collect_params(out, leaf);
                r.collect_params(out, leaf);
            }
            k => {
                let tag = k.token().to_ascii_lowercase();
                for (field, value, transform, role) in k.leaf_params() {
                    out.push(Hyperparameter {
                        name: format!("{tag}_{leaf}.{field}"),
                        value,
                        transform,
                        role,
                    });
                }
                *leaf += 1;
            }
        }
    }

    pub fn n_hyperparameters(&self) -> usize {
        match self {
            Kernel::Sum(l, r) | Kernel::Product(l, r) => l.n_hyperparameters() + r.n_hyperparameters(),
            k => k.leaf_params().len(),
        }
    }

    pub fn free_values(&self) -> Vec<f64> {
        self.hyperparameters().iter().map(Hyperparameter::free_value).collect()
    }

    /// Sets every hyperparameter from free (log / raw) values.
    pub fn set_free_values(&mut self, values: &[f64]) -> Result<()> {
        let transforms: Vec<Transform> = self.hyperparameters().iter().map(|h| h.transform).collect();
        if values.len() != transforms.len() {
            return Err(Error::Config(format!(
                "kernel has {} hyperparameters, got {} values",
                transforms.len(),
                values.len()
            )));
        }
        let raw: Vec<f64> = values.iter().zip(transforms).map(|(v, t)| from_free(t, *v)).collect();
        self.set_raw_values(&raw);
        Ok(())
    }

    /// Sets raw values in [`hyperparameters`](Self::hyperparameters) order.
    fn set_raw_values(&mut self, raw: &[f64]) {
        let mut rest = raw;
        self.for_each_leaf_mut(&mut |leaf| {
            let n = leaf.leaf_params().len();
            leaf.set_leaf_params(&rest[..n]);
            rest = &rest[n..];
        });
    }

    fn for_each_leaf_mut<'a>(&'a mut self, f: &mut dyn FnMut(&'a mut Kernel)) {
        match self {
            Kernel::Sum(l, r) | Kernel::Product(l, r) => {
                l.for_each_leaf_mut(f);
                r.for_each_leaf_mut(f);
            }
            k => f(k),
        }
    }

    /// Rewrites label-covariance angles into `[0, pi]`.
    pub fn canonicalize(&mut self) {
        self.for_each_leaf_mut(&mut |leaf| {
            if let Kernel::LabelCov(lc) = leaf {
                lc.canonicalize();
            }
        });
    }

    /// Raw hyperparameter values keyed by name.
    pub fn raw_map(&self) -> BTreeMap<String, f64> {
        self.hyperparameters().into_iter().map(|h| (h.name, h.value)).collect()
    }

    /// Sets hyperparameters from raw values; every name must be present.
    pub fn set_raw_map(&mut self, values: &BTreeMap<String, f64>) -> Result<()> {
        let raw = self
            .hyperparameters()
            .iter()
            .map(|h| {
                let v = *values
                    .get(&h.name)
                    .ok_or_else(|| Error::Config(format!("missing hyperparameter `{}`", h.name)))?;
                if h.transform == Transform::Log && !(v > 0.0 && v.is_finite()) {
                    return Err(Error::Config(format!("hyperparameter `{}` must be positive", h.name)));
                }
                Ok(v)
            })
            .collect::<Result<Vec<_>>>()?;
        self.set_raw_values(&raw);
        Ok(())
    }

    fn token(&self) -> String {
        match self {
            Kernel::SquaredExponential { .. } => "SE".into(),
            Kernel::Matern { nu: Smoothness::ThreeHalves, .. } => "MA3".into(),
            Kernel::Matern { nu: Smoothness::FiveHalves, .. } => "MA5".into(),
            Kernel::Periodic { .. } => "PER".into(),
            Kernel::WhiteNoise { .. } => "NOISE".into(),
            Kernel::LabelCov(lc) => format!("LABEL{}", lc.outputs()),
            Kernel::Sum(..) | Kernel::Product(..) => unreachable!("composite kernels have no token"),
        }
    }

    fn leaf_params(&self) -> Vec<(String, f64, Transform, Role)> {
        use Role::*;
        use Transform::*;
        match self {
            Kernel::SquaredExponential { output_scale, length_scale } => vec![
                ("output_scale".into(), *output_scale, Log, OutputScale),
                ("length_scale".into(), *length_scale, Log, LengthScale),
            ],
            Kernel::Matern { sigma, rho, .. } => vec![
                ("sigma".into(), *sigma, Log, OutputScale),
                ("rho".into(), *rho, Log, LengthScale),
            ],
            Kernel::Periodic { output_scale, length_scale, period } => vec![
                ("output_scale".into(), *output_scale, Log, OutputScale),
                ("length_scale".into(), *length_scale, Log, PeriodicLengthScale),
                ("period".into(), *period, Log, Period),
            ],
            Kernel::WhiteNoise { sigma } => vec![("sigma".into(), *sigma, Log, NoiseScale)],
            Kernel::LabelCov(lc) => {
                let mut v = vec![("tau".to_string(), lc.scale(), Log, LabelScale)];
                for (i, a) in lc.angles().iter().enumerate() {
                    v.push((format!("phi_{}", i + 1), *a, Identity, Angle));
                }
                v
            }
            Kernel::Sum(..) | Kernel::Product(..) => Vec::new(),
        }
    }

    fn set_leaf_params(&mut self, raw: &[f64]) {
        match self {
            Kernel::SquaredExponential { output_scale, length_scale } => {
                *output_scale = raw[0];
                *length_scale = raw[1];
            }
            Kernel::Matern { sigma, rho, .. } => {
                *sigma = raw[0];
                *rho = raw[1];
            }
            Kernel::Periodic { output_scale, length_scale, period } => {
                *output_scale = raw[0];
                *length_scale = raw[1];
                *period = raw[2];
            }
            Kernel::WhiteNoise { sigma } => *sigma = raw[0],
            Kernel::LabelCov(lc) => {
                lc.set_scale(raw[0]);
                lc.angles_mut().copy_from_slice(&raw[1..]);
            }
            Kernel::Sum(..) | Kernel::Product(..) => {}
        }
    }

    /// Pointwise evaluation. White noise is non-zero only for identical inputs.
    pub fn eval(&self, a: &LabeledInput, b: &LabeledInput) -> Result<f64> {
        match self {
            Kernel::Sum(l, r) => Ok(l.eval(a, b)? + r.eval(a, b)?),
            Kernel::Product(l, r) => Ok(l.eval(a, b)? * r.eval(a, b)?),
            Kernel::WhiteNoise { sigma } => Ok(if a == b { sigma * sigma } else { 0.0 }),
            Kernel::LabelCov(lc) => {
                check_label(a.label, lc.outputs())?;
                check_label(b.label, lc.outputs())?;
                Ok(lc.matrix()[(a.label - 1, b.label - 1)])
            }
            leaf => Ok(leaf.stationary_value(a.x - b.x)),
        }
    }

    fn stationary_value(&self, d: f64) -> f64 {
        match self {
            Kernel::SquaredExponential { output_scale, length_scale } => {
                eval_se(d, 0.0, *output_scale, *length_scale)
            }
            Kernel::Matern { nu, sigma, rho } => eval_matern(d, 0.0, *sigma, *rho, *nu),
            Kernel::Periodic { output_scale, length_scale, period } => {
                eval_periodic(d, 0.0, *output_scale, *length_scale, *period)
            }
            _ => unreachable!("not a stationary base kernel"),
        }
    }

    /// Value and free-space gradient of a stationary base kernel at lag `d`.
    fn stationary_grad(&self, d: f64, grad: &mut [f64]) -> f64 {
        match self {
            Kernel::SquaredExponential { output_scale, length_scale } => {
                let u = d / length_scale;
                let k = output_scale * output_scale * (-u * u).exp();
                grad[0] = 2.0 * k;
                grad[1] = 2.0 * k * u * u;
                k
            }
            Kernel::Matern { nu, sigma, rho } => {
                let s2 = sigma * sigma;
                let r = d.abs();
                match nu {
                    Smoothness::ThreeHalves => {
                        let a = SQRT3 * r / rho;
                        let e = (-a).exp();
                        let k = s2 * (1.0 + a) * e;
                        grad[0] = 2.0 * k;
                        grad[1] = s2 * a * a * e;
                        k
                    }
                    Smoothness::FiveHalves => {
                        let a = SQRT5 * r / rho;
                        let e = (-a).exp();
                        let k = s2 * (1.0 + a + a * a / 3.0) * e;
                        grad[0] = 2.0 * k;
                        grad[1] = s2 * a * a * (1.0 + a) / 3.0 * e;
                        k
                    }
                }
            }
            Kernel::Periodic { output_scale, length_scale, period } => {
                let arg = PI * d / period;
                let (s, c) = arg.sin_cos();
                let l2 = length_scale * length_scale;
                let k = output_scale * output_scale * (-2.0 * s * s / l2).exp();
                grad[0] = 2.0 * k;
                grad[1] = 4.0 * k * s * s / l2;
                grad[2] = 4.0 * k * s * c * arg / l2;
                k
            }
            _ => unreachable!("not a stationary base kernel"),
        }
    }

    /// Gram matrix between `xs` and `xs2`, or of `xs` with itself.
    ///
    /// The square form is filled from its upper triangle, so it is exactly
    /// symmetric.
    pub fn gram(&self, xs: &[LabeledInput], xs2: Option<&[LabeledInput]>) -> Result<DMatrix<f64>> {
        match self {
            Kernel::Sum(l, r) => Ok(l.gram(xs, xs2)? + r.gram(xs, xs2)?),
            Kernel::Product(l, r) => Ok(l.gram(xs, xs2)?.component_mul(&r.gram(xs, xs2)?)),
            leaf => Ok(leaf.leaf_gram(xs, xs2, false)?.0),
        }
    }

    /// Convenience for single-output inputs.
    pub fn gram_x(&self, xs: &[f64], xs2: Option<&[f64]>) -> Result<DMatrix<f64>> {
        let a = LabeledInput::single(xs);
        let b = xs2.map(LabeledInput::single);
        self.gram(&a, b.as_deref())
    }

    /// Square Gram matrix and its derivative w.r.t. every free hyperparameter.
    pub fn gram_with_gradients(&self, xs: &[LabeledInput]) -> Result<(DMatrix<f64>, Vec<DMatrix<f64>>)> {
        match self {
            Kernel::Sum(l, r) => {
                let (kl, mut gl) = l.gram_with_gradients(xs)?;
                let (kr, gr) = r.gram_with_gradients(xs)?;
                gl.extend(gr);
                Ok((kl + kr, gl))
            }
            Kernel::Product(l, r) => {
                let (kl, gl) = l.gram_with_gradients(xs)?;
                let (kr, gr) = r.gram_with_gradients(xs)?;
                let mut grads: Vec<DMatrix<f64>> = gl.iter().map(|g| g.component_mul(&kr)).collect();
                grads.extend(gr.iter().map(|g| kl.component_mul(g)));
                Ok((kl.component_mul(&kr), grads))
            }
            leaf => leaf.leaf_gram(xs, None, true),
        }
    }

    pub fn gram_gradients(&self, xs: &[LabeledInput]) -> Result<Vec<DMatrix<f64>>> {
        Ok(self.gram_with_gradients(xs)?.1)
    }

    /// Prior variance `k(x, x)` at each input.
    pub fn diag(&self, xs: &[LabeledInput]) -> Result<Vec<f64>> {
        xs.iter().map(|a| self.eval(a, a)).collect()
    }

    fn leaf_gram(
        &self,
        a: &[LabeledInput],
        b: Option<&[LabeledInput]>,
        with_grad: bool,
    ) -> Result<(DMatrix<f64>, Vec<DMatrix<f64>>)> {
        let n = a.len();
        let np = if with_grad { self.leaf_params().len() } else { 0 };
        match self {
            Kernel::WhiteNoise { sigma } => {
                let s2 = sigma * sigma;
                let k = match b {
                    None => DMatrix::identity(n, n) * s2,
                    Some(b) => DMatrix::zeros(n, b.len()),
                };
                let grads = if with_grad { vec![&k * 2.0] } else { Vec::new() };
                Ok((k, grads))
            }
            Kernel::LabelCov(lc) => {
                let m = lc.outputs();
                for p in a.iter().chain(b.unwrap_or(&[])) {
                    check_label(p.label, m)?;
                }
                let base = lc.matrix();
                let lg = if with_grad { lc.gradients() } else { Vec::new() };
                let pick = |mat: &DMatrix<f64>, p: &LabeledInput, q: &LabeledInput| {
                    mat[(p.label - 1, q.label - 1)]
                };
                let b = b.unwrap_or(a);
                let k = DMatrix::from_fn(n, b.len(), |i, j| pick(&base, &a[i], &b[j]));
                let grads = lg
                    .iter()
                    .map(|g| DMatrix::from_fn(n, b.len(), |i, j| pick(g, &a[i], &b[j])))
                    .collect();
                Ok((k, grads))
            }
            _ => match b {
                Some(b) => {
                    debug_assert!(!with_grad);
                    Ok((DMatrix::from_fn(n, b.len(), |i, j| self.stationary_value(a[i].x - b[j].x)), Vec::new()))
                }
                None => {
                    let mut k = DMatrix::zeros(n, n);
                    let mut grads = vec![DMatrix::zeros(n, n); np];
                    let mut g = vec![0.0; np.max(3)];
                    for j in 0..n {
                        for i in 0..=j {
                            let d = a[i].x - a[j].x;
                            let v = if with_grad {
                                let v = self.stationary_grad(d, &mut g);
                                for (p, gm) in grads.iter_mut().enumerate() {
                                    gm[(i, j)] = g[p];
                                    gm[(j, i)] = g[p];
                                }
                                v
                            } else {
                                self.stationary_value(d)
                            };
                            k[(i, j)] = v;
                            k[(j, i)] = v;
                        }
                    }
                    Ok((k, grads))
                }
            },
        }
    }

    /// Expression plus raw hyperparameters, for serialization.
    pub fn to_spec(&self) -> KernelSpec {
        KernelSpec { expression: self.to_string(), hyperparameters: self.raw_map() }
    }

    pub fn from_spec(spec: &KernelSpec) -> Result<Self> {
        let mut k: Kernel = spec.expression.parse()?;
        k.set_raw_map(&spec.hyperparameters)?;
        Ok(k)
    }
}

fn check_label(label: usize, outputs: usize) -> Result<()> {
    if label == 0 || label > outputs {
        return Err(Error::Bounds(format!("label {label} outside 1..={outputs}")));
    }
    Ok(())
}

/// Serialized kernel: text expression and raw hyperparameter values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelSpec {
    pub expression: String,
    pub hyperparameters: BTreeMap<String, f64>,
}

impl fmt::Display for Kernel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Kernel::Sum(l, r) => write!(f, "{l}+{r}"),
            Kernel::Product(l, r) => {
                for (i, k) in [l, r].into_iter().enumerate() {
                    if i > 0 {
                        write!(f, "*")?;
                    }
                    if matches!(**k, Kernel::Sum(..)) {
                        write!(f, "({k})")?;
                    } else {
                        write!(f, "{k}")?;
                    }
                }
                Ok(())
            }
            leaf => write!(f, "{}", leaf.token()),
        }
    }
}

/// Parses `SE`, `MA3`, `MA5`, `PER`, `NOISE` and `LABEL<m>` joined by `+`
/// and `*` (which binds tighter), with parentheses. Hyperparameters start at
/// unit values.
impl FromStr for Kernel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let tokens = tokenize(s)?;
        let mut pos = 0;
        let k = parse_sum(&tokens, &mut pos)?;
        if pos != tokens.len() {
            return Err(Error::Parse(format!("unexpected `{}` in kernel `{s}`", tokens[pos])));
        }
        Ok(k)
    }
}

fn tokenize(s: &str) -> Result<Vec<String>> {
    let mut out = Vec::new();
    let mut word = String::new();
    for ch in s.chars() {
        if ch.is_ascii_alphanumeric() || ch == '_' {
            word.push(ch);
            continue;
        }
        if !word.is_empty() {
            out.push(std::mem::take(&mut word));
        }
        match ch {
            '+' | '*' | '(' | ')' => out.push(ch.to_string()),
            c if c.is_whitespace() => {}
            c => return Err(Error::Parse(format!("unexpected character `{c}` in kernel `{s}`"))),
        }
    }
    if !word.is_empty() {
        out.push(word);
    }
    if out.is_empty() {
        return Err(Error::Parse("empty kernel expression".into()));
    }
    Ok(out)
}

fn parse_sum(tokens: &[String], pos: &mut usize) -> Result<Kernel> {
    let mut k = parse_product(tokens, pos)?;
    while tokens.get(*pos).map(String::as_str) == Some("+") {
        *pos += 1;
        k = Kernel::sum(k, parse_product(tokens, pos)?);
    }
    Ok(k)
}

fn parse_product(tokens: &[String], pos: &mut usize) -> Result<Kernel> {
    let mut k = parse_atom(tokens, pos)?;
    while tokens.get(*pos).map(String::as_str) == Some("*") {
        *pos += 1;
        k = Kernel::product(k, parse_atom(tokens, pos)?);
    }
    Ok(k)
}

fn parse_atom(tokens: &[String], pos: &mut usize) -> Result<Kernel> {
    let tok = tokens
        .get(*pos)
        .ok_or_else(|| Error::Parse("kernel expression ends unexpectedly".into()))?;
    *pos += 1;
    if tok == "(" {
        let k = parse_sum(tokens, pos)?;
        if tokens.get(*pos).map(String::as_str) != Some(")") {
            return Err(Error::Parse("missing `)` in kernel expression".into()));
        }
        *pos += 1;
        return Ok(k);
    }
    let upper = tok.to_ascii_uppercase();
    match upper.as_str() {
        "SE" => Ok(Kernel::se()),
        "MA3" => Ok(Kernel::matern(Smoothness::ThreeHalves)),
        "MA5" => Ok(Kernel::matern(Smoothness::FiveHalves)),
        "PER" | "PE" => Ok(Kernel::periodic()),
        "NOISE" => Ok(Kernel::white_noise()),
        other => match other.strip_prefix("LABEL").map(str::parse::<usize>) {
            Some(Ok(m)) => Ok(Kernel::LabelCov(LabelCovariance::independent(m)?)),
            _ => Err(Error::Parse(format!("unknown kernel `{tok}`"))),
        },
    }
}
