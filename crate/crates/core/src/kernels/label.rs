//! Label covariance for multi-output models, `K_l = tau * S^T S`.
//!
//! Column `j` of the upper-triangular `S` is a unit vector in `R^(j+1)`
//! written in hyperspherical coordinates, so `S^T S` has a unit diagonal and
//! off-diagonal entries that behave like correlation coefficients. An
//! `m`-output covariance carries `m(m-1)/2` angles and one shared scale.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelCovariance {
    outputs: usize,
    scale: f64,
    angles: Vec<f64>,
}

pub fn angle_count(outputs: usize) -> usize {
    outputs * outputs.saturating_sub(1) / 2
}

impl LabelCovariance {
    pub fn new(outputs: usize, scale: f64, angles: Vec<f64>) -> Result<Self> {
        if outputs < 2 {
            return Err(Error::Config(format!("label covariance needs at least 2 outputs, got {outputs}")));
        }
        if angles.len() != angle_count(outputs) {
            return Err(Error::Config(format!(
                "{} outputs need {} angles, got {}",
                outputs,
                angle_count(outputs),
                angles.len()
            )));
        }
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(Error::Config(format!("label scale {scale} must be positive")));
        }
        Ok(Self { outputs, scale, angles })
    }

    /// Independent outputs: every angle at `pi/2`.
    pub fn independent(outputs: usize) -> Result<Self> {
        Self::new(outputs, 1.0, vec![std::f64::consts::FRAC_PI_2; angle_count(outputs)])
    }

    pub fn outputs(&self) -> usize {
        self.outputs
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn angles(&self) -> &[f64] {
        &self.angles
    }

    pub(crate) fn set_scale(&mut self, scale: f64) {
        self.scale = scale;
    }

    pub(crate) fn angles_mut(&mut self) -> &mut [f64] {
        &mut self.angles
    }

    fn column_angles(&self, j: usize) -> &[f64] {
        let offset = j * (j - 1) / 2;
        &self.angles[offset..offset + j]
    }

    /// The upper-triangular factor `S`.
    pub fn factor(&self) -> DMatrix<f64> {
        let m = self.outputs;
        let mut s = DMatrix::zeros(m, m);
        s[(0, 0)] = 1.0;
        for j in 1..m {
            let col = sphere_point(self.column_angles(j), None);
            for (k, v) in col.into_iter().enumerate() {
                s[(k, j)] = v;
            }
        }
        s
    }

    /// `S^T S`, unit diagonal.
    pub fn correlation(&self) -> DMatrix<f64> {
        let s = self.factor();
        let mut c = s.transpose() * &s;
        for i in 0..self.outputs {
            c[(i, i)] = 1.0;
            for j in 0..i {
                c[(i, j)] = c[(j, i)];
            }
        }
        c
    }

    pub fn matrix(&self) -> DMatrix<f64> {
        self.correlation() * self.scale
    }

    /// Derivatives of [`matrix`](Self::matrix) w.r.t. `log(scale)` followed
    /// by each raw angle.
    pub fn gradients(&self) -> Vec<DMatrix<f64>> {
        let m = self.outputs;
        let s = self.factor();
        let mut out = Vec::with_capacity(1 + self.angles.len());
        out.push(self.matrix());
        for j in 1..m {
            let angles = self.column_angles(j);
            for t in 0..j {
                let ds = sphere_point(angles, Some(t));
                let mut g = DMatrix::zeros(m, m);
                // only column j of S moves
                for b in 0..m {
                    let dot: f64 = (0..=j).map(|k| ds[k] * s[(k, b)]).sum();
                    g[(j, b)] += dot;
                    g[(b, j)] += dot;
                }
                out.push(g * self.scale);
            }
        }
        out
    }

    /// Rewrites the angles into `[0, pi]` without changing the matrix.
    ///
    /// Flipping the sign of a whole row of `S` leaves `S^T S` unchanged, so
    /// rows are flipped until the diagonal of `S` is non-negative and the
    /// angles are read back from the resulting columns.
    pub fn canonicalize(&mut self) {
        let mut s = self.factor();
        let m = self.outputs;
        for k in 1..m {
            if s[(k, k)] < 0.0 {
                for j in k..m {
                    s[(k, j)] = -s[(k, j)];
                }
            }
        }
        let mut angles = Vec::with_capacity(self.angles.len());
        for j in 1..m {
            let col: Vec<f64> = (0..=j).map(|k| s[(k, j)]).collect();
            for t in 0..j {
                let tail = if t + 1 == j {
                    col[j]
                } else {
                    col[t + 1..].iter().map(|v| v * v).sum::<f64>().sqrt()
                };
                angles.push(tail.atan2(col[t]));
            }
        }
        self.angles = angles;
    }
}

/// Point on the unit sphere in `R^(n+1)` from `n` angles, or its derivative
/// with respect to angle `wrt`.
fn sphere_point(angles: &[f64], wrt: Option<usize>) -> Vec<f64> {
    let n = angles.len();
    let sin = |i: usize| if wrt == Some(i) { angles[i].cos() } else { angles[i].sin() };
    let cos = |i: usize| if wrt == Some(i) { -angles[i].sin() } else { angles[i].cos() };
    let mut out = vec![0.0; n + 1];
    let mut prod = 1.0;
    for k in 0..n {
        // coordinates before the differentiated angle do not depend on it
        if wrt.is_none_or(|t| t <= k) {
            out[k] = prod * cos(k);
        }
        prod *= sin(k);
    }
    out[n] = prod;
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::{FRAC_PI_2, PI};

    #[test]
    fn two_outputs_extremes() {
        let k = LabelCovariance::new(2, 3.0, vec![0.0]).unwrap().matrix();
        assert_eq!(k, DMatrix::from_element(2, 2, 3.0));
        let k = LabelCovariance::new(2, 3.0, vec![FRAC_PI_2]).unwrap().matrix();
        assert!((k - DMatrix::identity(2, 2) * 3.0).abs().max() < 1e-15);
    }

    #[test]
    fn three_output_factor_layout() {
        let (p1, p2, p3) = (0.3, 1.1, 2.0);
        let s = LabelCovariance::new(3, 1.0, vec![p1, p2, p3]).unwrap().factor();
        let expected = DMatrix::from_row_slice(
            3,
            3,
            &[
                1.0, p1.cos(), p2.cos(),
                0.0, p1.sin(), p2.sin() * p3.cos(),
                0.0, 0.0, p2.sin() * p3.sin(),
            ],
        );
        assert!((s - expected).abs().max() < 1e-15);
    }

    #[test]
    fn wrong_angle_count_is_config_error() {
        assert!(matches!(LabelCovariance::new(3, 1.0, vec![0.1]), Err(Error::Config(_))));
        assert!(matches!(LabelCovariance::new(1, 1.0, vec![]), Err(Error::Config(_))));
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for m in 2..=5 {
            let angles: Vec<f64> = (0..angle_count(m)).map(|_| rng.gen_range(-4.0..4.0)).collect();
            let base = LabelCovariance::new(m, 1.7, angles.clone()).unwrap();
            let grads = base.gradients();
            let h: f64 = 1e-6;
            let fd_scale = (LabelCovariance::new(m, 1.7 * h.exp(), angles.clone()).unwrap().matrix()
                - LabelCovariance::new(m, 1.7 * (-h).exp(), angles.clone()).unwrap().matrix())
                / (2.0 * h);
            assert!((&grads[0] - fd_scale).abs().max() < 1e-7);
            for a in 0..angles.len() {
                let mut up = angles.clone();
                let mut down = angles.clone();
                up[a] += h;
                down[a] -= h;
                let fd = (LabelCovariance::new(m, 1.7, up).unwrap().matrix()
                    - LabelCovariance::new(m, 1.7, down).unwrap().matrix())
                    / (2.0 * h);
                assert!((&grads[a + 1] - fd).abs().max() < 1e-7, "m={m} angle {a}");
            }
        }
    }

    #[test]
    fn canonical_angles_preserve_matrix() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for m in 2..=5 {
            for _ in 0..50 {
                let angles: Vec<f64> =
                    (0..angle_count(m)).map(|_| rng.gen_range(-10.0..10.0)).collect();
                let mut lc = LabelCovariance::new(m, 0.5, angles).unwrap();
                let before = lc.matrix();
                lc.canonicalize();
                assert!(lc.angles().iter().all(|a| (0.0..=PI).contains(a)));
                assert!((lc.matrix() - before).abs().max() < 1e-12);
            }
        }
    }
}
