//! Cholesky factorization with escalating diagonal jitter.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Jitter schedule, relative to the mean of the diagonal.
///
/// Factorization is first tried as is, then with `initial * mean(diag)`
/// added, growing by `growth` until `max * mean(diag)` is exceeded.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JitterPolicy {
    pub initial: f64,
    pub growth: f64,
    pub max: f64,
}

impl Default for JitterPolicy {
    fn default() -> Self {
        Self { initial: 1e-9, growth: 10.0, max: 1e-3 }
    }
}

/// A lower-triangular factor and the absolute jitter it needed.
#[derive(Debug, Clone)]
pub struct Factor {
    pub chol: Cholesky<f64, Dyn>,
    pub jitter: f64,
}

impl Factor {
    pub fn l(&self) -> DMatrix<f64> {
        self.chol.l()
    }

    pub fn log_det(&self) -> f64 {
        2.0 * self.chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>()
    }
}

pub fn factorize(matrix: &DMatrix<f64>, policy: &JitterPolicy) -> Result<Factor> {
    if let Some(chol) = Cholesky::new(matrix.clone()) {
        if finite_factor(&chol) {
            return Ok(Factor { chol, jitter: 0.0 });
        }
    }
    let n = matrix.nrows();
    let scale = if n == 0 { 1.0 } else { (matrix.trace() / n as f64).abs().max(f64::MIN_POSITIVE) };
    let mut rel = policy.initial;
    while rel <= policy.max * (1.0 + 1e-12) {
        let jitter = rel * scale;
        let mut m = matrix.clone();
        for i in 0..n {
            m[(i, i)] += jitter;
        }
        if let Some(chol) = Cholesky::new(m) {
            if finite_factor(&chol) {
                return Ok(Factor { chol, jitter });
            }
        }
        rel *= policy.growth;
    }
    Err(Error::Numerical { jitter: policy.max * scale, condition: condition_estimate(matrix) })
}

fn finite_factor(chol: &Cholesky<f64, Dyn>) -> bool {
    chol.l_dirty().diagonal().iter().all(|d| d.is_finite() && *d > 0.0)
}

/// Ratio of largest to smallest absolute eigenvalue; infinite when singular.
pub fn condition_estimate(matrix: &DMatrix<f64>) -> f64 {
    if matrix.iter().any(|v| !v.is_finite()) {
        return f64::INFINITY;
    }
    let eig = matrix.clone().symmetric_eigenvalues();
    let max = eig.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let min = eig.iter().fold(f64::INFINITY, |a, v| a.min(v.abs()));
    if min == 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

/// Minimum-norm least-squares solution of `a x = b`.
///
/// Works on the eigendecomposition of `a^T a`; directions with eigenvalue
/// below `1e-12` of the largest (singular value ratio `1e-6`) are dropped.
pub fn lstsq_min_norm(a: &DMatrix<f64>, b: &DVector<f64>) -> DVector<f64> {
    let atb = a.tr_mul(b);
    let eig = a.tr_mul(a).symmetric_eigen();
    let top = eig.eigenvalues.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let mut x = DVector::zeros(a.ncols());
    for (k, &l) in eig.eigenvalues.iter().enumerate() {
        if l > 1e-12 * top {
            let v = eig.eigenvectors.column(k);
            x += v * (v.dot(&atb) / l);
        }
    }
    x
}
