//! Prior mean functions: zero, constant, and exponential degradation
//! `a1 + a2 * exp(a3 * x)` whose parameters are trained jointly with the
//! kernel hyperparameters.

use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MeanFunction {
    Zero,
    Constant { value: f64, trainable: bool },
    ExpDegradation { params: [f64; 3], trainable: [bool; 3] },
}

/// Which mean function to build once training data is known.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum MeanKind {
    Zero,
    Const,
    Expdeg,
}

impl FromStr for MeanKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "ZERO" => Ok(MeanKind::Zero),
            "CONST" => Ok(MeanKind::Const),
            "EXPDEG" => Ok(MeanKind::Expdeg),
            other => Err(Error::Parse(format!("unknown mean function `{other}`"))),
        }
    }
}

impl fmt::Display for MeanKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MeanKind::Zero => "ZERO",
            MeanKind::Const => "CONST",
            MeanKind::Expdeg => "EXPDEG",
        })
    }
}

impl MeanKind {
    /// Data-driven starting point.
    ///
    /// `CONST` is fixed at the mean of the observed targets. `EXPDEG` starts
    /// from a crude decay through the first and last observations:
    /// `a1 = last`, `a2 = first - last`, `a3 = -1 / range(x)`.
    pub fn initialize(self, xs: &[f64], ys: &[f64]) -> Result<MeanFunction> {
        if ys.is_empty() || xs.len() != ys.len() {
            return Err(Error::DegenerateInput("mean initialization needs matching, non-empty data".into()));
        }
        Ok(match self {
            MeanKind::Zero => MeanFunction::Zero,
            MeanKind::Const => MeanFunction::Constant {
                value: ys.iter().sum::<f64>() / ys.len() as f64,
                trainable: false,
            },
            MeanKind::Expdeg => {
                let (lo, hi) = xs.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &x| (a.min(x), b.max(x)));
                let range = if hi > lo { hi - lo } else { 1.0 };
                let (first, last) = (ys[0], ys[ys.len() - 1]);
                MeanFunction::ExpDegradation { params: [last, first - last, -1.0 / range], trainable: [true; 3] }
            }
        })
    }
}

impl MeanFunction {
    pub fn kind(&self) -> MeanKind {
        match self {
            MeanFunction::Zero => MeanKind::Zero,
            MeanFunction::Constant { .. } => MeanKind::Const,
            MeanFunction::ExpDegradation { .. } => MeanKind::Expdeg,
        }
    }

    pub fn exp_degradation(a1: f64, a2: f64, a3: f64) -> Self {
        MeanFunction::ExpDegradation { params: [a1, a2, a3], trainable: [true; 3] }
    }

    pub fn eval(&self, xs: &[f64]) -> Result<Vec<f64>> {
        match self {
            MeanFunction::Zero => Ok(vec![0.0; xs.len()]),
            MeanFunction::Constant { value, .. } => Ok(vec![*value; xs.len()]),
            MeanFunction::ExpDegradation { params: [a1, a2, a3], .. } => xs
                .iter()
                .map(|&x| {
                    if *a2 == 0.0 {
                        return Ok(*a1);
                    }
                    let e = (a3 * x).exp();
                    let v = a1 + a2 * e;
                    if e.is_finite() && v.is_finite() {
                        Ok(v)
                    } else {
                        Err(Error::Evaluation(format!(
                            "exponential mean overflows at x = {x} (a3 = {a3})"
                        )))
                    }
                })
                .collect(),
        }
    }

    /// Names and values of trainable parameters.
    pub fn trainable(&self) -> Vec<(String, f64)> {
        match self {
            MeanFunction::Zero => Vec::new(),
            MeanFunction::Constant { value, trainable } => {
                if *trainable {
                    vec![("mean.value".into(), *value)]
                } else {
                    Vec::new()
                }
            }
            MeanFunction::ExpDegradation { params, trainable } => (0..3)
                .filter(|&i| trainable[i])
                .map(|i| (format!("mean.a{}", i + 1), params[i]))
                .collect(),
        }
    }

    pub fn n_trainable(&self) -> usize {
        self.trainable().len()
    }

    pub fn set_trainable(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.n_trainable() {
            return Err(Error::Config(format!(
                "mean has {} trainable parameters, got {}",
                self.n_trainable(),
                values.len()
            )));
        }
        match self {
            MeanFunction::Zero => {}
            MeanFunction::Constant { value, trainable } => {
                if *trainable {
                    *value = values[0];
                }
            }
            MeanFunction::ExpDegradation { params, trainable } => {
                let mut it = values.iter();
                for i in 0..3 {
                    if trainable[i] {
                        params[i] = *it.next().unwrap();
                    }
                }
            }
        }
        Ok(())
    }

    /// `d m(x_i) / d theta_j` for each point and trainable parameter.
    pub fn gradients(&self, xs: &[f64]) -> DMatrix<f64> {
        match self {
            MeanFunction::Zero => DMatrix::zeros(xs.len(), 0),
            MeanFunction::Constant { trainable, .. } => {
                DMatrix::from_element(xs.len(), usize::from(*trainable), 1.0)
            }
            MeanFunction::ExpDegradation { params: [_, a2, a3], trainable } => {
                let cols: Vec<usize> = (0..3).filter(|&i| trainable[i]).collect();
                DMatrix::from_fn(xs.len(), cols.len(), |i, j| {
                    let x = xs[i];
                    let e = (a3 * x).exp();
                    match cols[j] {
                        0 => 1.0,
                        1 => e,
                        _ => a2 * x * e,
                    }
                })
            }
        }
    }
}

impl fmt::Display for MeanFunction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MeanFunction::Zero => write!(f, "ZERO"),
            MeanFunction::Constant { value, .. } => write!(f, "CONST({value})"),
            MeanFunction::ExpDegradation { params: [a1, a2, a3], .. } => {
                write!(f, "EXPDEG({a1} + {a2}·exp({a3}·x))")
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn exp_degradation_values() {
        let xs = [0.0, 5.0, 1e3];
        assert_eq!(MeanFunction::exp_degradation(1.0, 0.0, 3.0).eval(&xs).unwrap(), vec![1.0; 3]);
        assert_eq!(MeanFunction::exp_degradation(0.8, 0.2, 0.0).eval(&xs).unwrap(), vec![1.0; 3]);
        let v = MeanFunction::exp_degradation(0.5, 0.5, -0.01).eval(&[100.0]).unwrap()[0];
        assert!((v - (0.5 + 0.5 * (-1.0f64).exp())).abs() < 1e-15);
    }

    #[test]
    fn overflow_names_the_input() {
        let err = MeanFunction::exp_degradation(0.0, 1.0, 10.0).eval(&[1.0, 100.0]).unwrap_err();
        assert!(err.to_string().contains("x = 100"), "{err}");
    }

    #[test]
    fn zero_and_constant() {
        assert_eq!(MeanFunction::Zero.eval(&[1.0, 2.0]).unwrap(), vec![0.0, 0.0]);
        assert_eq!(MeanFunction::Zero.gradients(&[1.0, 2.0]).ncols(), 0);
        let c = MeanFunction::Constant { value: 0.9, trainable: true };
        assert_eq!(c.gradients(&[1.0, 2.0]), DMatrix::from_element(2, 1, 1.0));
        let fixed = MeanKind::Const.initialize(&[1.0, 2.0], &[1.0, 0.8]).unwrap();
        assert_eq!(fixed, MeanFunction::Constant { value: 0.9, trainable: false });
        assert!(fixed.trainable().is_empty());
    }

    #[test]
    fn expdeg_initialization() {
        let m = MeanKind::Expdeg.initialize(&[10.0, 20.0, 60.0], &[1.0, 0.95, 0.8]).unwrap();
        match m {
            MeanFunction::ExpDegradation { params, .. } => {
                assert!((params[0] - 0.8).abs() < 1e-15);
                assert!((params[1] - 0.2).abs() < 1e-15);
                assert!((params[2] + 0.02).abs() < 1e-15);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn parses_kinds() {
        assert_eq!("EXPDEG".parse::<MeanKind>().unwrap(), MeanKind::Expdeg);
        assert_eq!("const".parse::<MeanKind>().unwrap(), MeanKind::Const);
        assert!("LINEAR".parse::<MeanKind>().is_err());
    }

    proptest! {
        #[test]
        fn gradients_match_finite_differences(
            a1 in -2.0f64..2.0, a2 in -2.0f64..2.0, a3 in -0.05f64..0.05, x in 0.0f64..100.0,
        ) {
            let m = MeanFunction::exp_degradation(a1, a2, a3);
            let g = m.gradients(&[x]);
            let base = [a1, a2, a3];
            for j in 0..3 {
                let h = 1e-6 * base[j].abs().max(1e-3);
                let mut up = base;
                let mut down = base;
                up[j] += h;
                down[j] -= h;
                let fu = MeanFunction::exp_degradation(up[0], up[1], up[2]).eval(&[x]).unwrap()[0];
                let fd = MeanFunction::exp_degradation(down[0], down[1], down[2]).eval(&[x]).unwrap()[0];
                let numeric = (fu - fd) / (2.0 * h);
                let err = (numeric - g[(0, j)]).abs();
                prop_assert!(err <= 1e-5 * numeric.abs().max(g[(0, j)].abs()).max(1e-6), "j={} {} vs {}", j, numeric, g[(0, j)]);
            }
        }

        #[test]
        fn monotone_orientation(a1 in -1.0f64..1.0, a2 in 0.01f64..1.0, a3 in 0.001f64..0.05, x in 0.0f64..100.0) {
            let up = MeanFunction::exp_degradation(a1, a2, a3).eval(&[x, x + 1.0]).unwrap();
            prop_assert!(up[1] > up[0]);
            let down = MeanFunction::exp_degradation(a1, -a2, a3).eval(&[x, x + 1.0]).unwrap();
            prop_assert!(down[1] < down[0]);
        }
    }
}
