//! Limited-memory BFGS with box constraints handled by projection.
//!
//! The line search is a backtracking Armijo search along the projected path,
//! so every accepted step decreases the objective. Evaluations that fail
//! (return `None`) count as `+inf` and simply shrink the step.

use std::collections::VecDeque;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LbfgsConfig {
    pub max_iterations: usize,
    /// Stop when the projected gradient's max-norm is below `tol * (1 + |f|)`.
    pub gradient_tolerance: f64,
    pub memory: usize,
}

impl Default for LbfgsConfig {
    fn default() -> Self {
        Self { max_iterations: 200, gradient_tolerance: 1e-6, memory: 8 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Outcome {
    pub x: Vec<f64>,
    pub f: f64,
    pub iterations: usize,
    pub evaluations: usize,
    pub converged: bool,
}

fn project(x: &mut [f64], lower: &[f64], upper: &[f64]) {
    for ((v, lo), hi) in x.iter_mut().zip(lower).zip(upper) {
        *v = v.clamp(*lo, *hi);
    }
}

/// Gradient with components that point out of an active bound zeroed.
fn projected_gradient(x: &[f64], g: &[f64], lower: &[f64], upper: &[f64]) -> Vec<f64> {
    (0..x.len())
        .map(|i| {
            if (x[i] <= lower[i] && g[i] > 0.0) || (x[i] >= upper[i] && g[i] < 0.0) {
                0.0
            } else {
                g[i]
            }
        })
        .collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn two_loop(g: &[f64], history: &VecDeque<(Vec<f64>, Vec<f64>, f64)>) -> Vec<f64> {
    let mut q = g.to_vec();
    let mut alphas = Vec::with_capacity(history.len());
    for (s, y, rho) in history.iter().rev() {
        let a = rho * dot(s, &q);
        q.iter_mut().zip(y).for_each(|(qi, yi)| *qi -= a * yi);
        alphas.push(a);
    }
    if let Some((s, y, _)) = history.back() {
        let gamma = dot(s, y) / dot(y, y);
        q.iter_mut().for_each(|v| *v *= gamma);
    }
    for ((s, y, rho), a) in history.iter().zip(alphas.into_iter().rev()) {
        let b = rho * dot(y, &q);
        q.iter_mut().zip(s).for_each(|(qi, si)| *qi += (a - b) * si);
    }
    q.iter_mut().for_each(|v| *v = -*v);
    q
}

/// Minimizes `f` over the box `[lower, upper]` starting from `x0`.
///
/// `f` returns the value and gradient, or `None` where it cannot be
/// evaluated. Returns `None` if the (projected) starting point fails.
pub fn minimize<F>(mut f: F, x0: &[f64], lower: &[f64], upper: &[f64], config: &LbfgsConfig) -> Option<Outcome>
where
    F: FnMut(&[f64]) -> Option<(f64, Vec<f64>)>,
{
    let n = x0.len();
    let mut x = x0.to_vec();
    project(&mut x, lower, upper);
    let mut evaluations = 1;
    let (mut fx, mut g) = f(&x).filter(|(v, g)| v.is_finite() && g.iter().all(|d| d.is_finite()))?;
    let mut history: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::new();
    let mut iterations = 0;
    let mut converged = false;

    while iterations < config.max_iterations {
        let pg = projected_gradient(&x, &g, lower, upper);
        let pg_norm = pg.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        if pg_norm <= config.gradient_tolerance * (1.0 + fx.abs()) {
            converged = true;
            break;
        }
        iterations += 1;

        // coordinates held at a bound stay fixed for this step
        let active: Vec<bool> = (0..n).map(|i| pg[i] == 0.0 && g[i] != 0.0).collect();
        let mut d = two_loop(&pg, &history);
        for (di, a) in d.iter_mut().zip(&active) {
            if *a {
                *di = 0.0;
            }
        }
        if history.is_empty() || dot(&d, &pg) >= 0.0 {
            history.clear();
            let scale = 1.0 / pg_norm.max(1.0);
            d = pg.iter().map(|v| -v * scale).collect();
        }

        // backtracking along the projected path
        let mut step = 1.0;
        let mut accepted = None;
        for _ in 0..40 {
            let mut trial: Vec<f64> = x.iter().zip(&d).map(|(xi, di)| xi + step * di).collect();
            project(&mut trial, lower, upper);
            let moved: Vec<f64> = trial.iter().zip(&x).map(|(a, b)| a - b).collect();
            let decrease = dot(&g, &moved);
            if decrease >= 0.0 && moved.iter().all(|v| *v == 0.0) {
                break;
            }
            evaluations += 1;
            if let Some((ft, gt)) = f(&trial) {
                if ft.is_finite() && gt.iter().all(|v| v.is_finite()) && ft <= fx + 1e-4 * decrease.min(0.0) {
                    accepted = Some((trial, ft, gt));
                    break;
                }
            }
            step *= 0.5;
        }

        let Some((trial, ft, gt)) = accepted else {
            if history.is_empty() {
                // no descent possible even along the gradient
                converged = true;
                break;
            }
            history.clear();
            continue;
        };

        let s: Vec<f64> = trial.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = gt.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > 1e-10 * dot(&s, &s).sqrt() * dot(&y, &y).sqrt() {
            if history.len() == config.memory {
                history.pop_front();
            }
            history.push_back((s, y, 1.0 / sy));
        }

        let stalled = (fx - ft).abs() <= 1e-13 * (1.0 + fx.abs());
        x = trial;
        fx = ft;
        g = gt;
        if stalled {
            converged = true;
            break;
        }
    }
    debug_assert_eq!(x.len(), n);
    Some(Outcome { x, f: fx, iterations, evaluations, converged })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rosenbrock(x: &[f64]) -> Option<(f64, Vec<f64>)> {
        let (a, b) = (x[0], x[1]);
        let f = (1.0 - a).powi(2) + 100.0 * (b - a * a).powi(2);
        let g = vec![-2.0 * (1.0 - a) - 400.0 * a * (b - a * a), 200.0 * (b - a * a)];
        Some((f, g))
    }

    #[test]
    fn finds_rosenbrock_minimum() {
        let cfg = LbfgsConfig { max_iterations: 500, gradient_tolerance: 1e-9, memory: 8 };
        let out = minimize(rosenbrock, &[-1.2, 1.0], &[-5.0, -5.0], &[5.0, 5.0], &cfg).unwrap();
        assert!(out.converged);
        assert!((out.x[0] - 1.0).abs() < 1e-4 && (out.x[1] - 1.0).abs() < 1e-4, "{:?}", out.x);
    }

    #[test]
    fn respects_bounds() {
        let f = |x: &[f64]| Some(((x[0] - 3.0).powi(2) + (x[1] + 1.0).powi(2), vec![2.0 * (x[0] - 3.0), 2.0 * (x[1] + 1.0)]));
        let out = minimize(f, &[0.0, 0.0], &[-1.0, -0.5], &[1.0, 1.0], &LbfgsConfig::default()).unwrap();
        assert_eq!(out.x, vec![1.0, -0.5]);
        assert!(out.converged);
    }

    #[test]
    fn failed_regions_are_avoided() {
        // undefined for x > 0.5; minimum of the defined part is at the edge
        let f = |x: &[f64]| if x[0] > 0.5 { None } else { Some(((x[0] - 2.0).powi(2), vec![2.0 * (x[0] - 2.0)])) };
        let out = minimize(f, &[0.0], &[-10.0], &[10.0], &LbfgsConfig::default()).unwrap();
        assert!(out.x[0] <= 0.5 && out.x[0] > 0.4, "{:?}", out.x);
        assert!(minimize(f, &[1.0], &[-10.0], &[10.0], &LbfgsConfig::default()).is_none());
    }

    #[test]
    fn value_never_increases() {
        let mut seen = Vec::new();
        let cfg = LbfgsConfig { max_iterations: 50, ..Default::default() };
        let out = minimize(
            |x| {
                let r = rosenbrock(x);
                seen.push(r.as_ref().unwrap().0);
                r
            },
            &[-1.2, 1.0],
            &[-5.0, -5.0],
            &[5.0, 5.0],
            &cfg,
        )
        .unwrap();
        assert!(out.f <= seen[0]);
    }
}
