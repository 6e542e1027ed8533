//! Deterministic surrogate datasets shaped like the public battery data.
//!
//! The generators stand in for data that is not bundled with the crate:
//! a NASA-style cell with capacity regeneration after rest periods, an
//! exponentially fading cell with a mid-life plateau, and three correlated
//! cells measured against time on ragged grids.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::dataset::{CapacitySeries, Fleet};
use crate::error::Result;

pub const A1_SEED: u64 = 5;
pub const B_SEED: u64 = 3;
pub const C_SEED: u64 = 11;

/// Capacity threshold used with [`dataset_b`].
pub const B_EOL: f64 = 0.8;
/// Capacity threshold used with [`dataset_c`].
pub const C_EOL: f64 = 0.7;

/// Cycles after which a rest period lets capacity recover.
const A1_REST: [(f64, f64); 8] = [
    (20.0, 0.030),
    (31.0, 0.022),
    (47.0, 0.040),
    (61.0, 0.026),
    (89.0, 0.045),
    (108.0, 0.030),
    (125.0, 0.024),
    (148.0, 0.035),
];

/// 168 cycles, 1.8565 Ah initially, fading to about 0.69 with regeneration
/// jumps that decay over roughly four cycles and short-range roughness.
pub fn cell_a1(seed: u64) -> Result<CapacitySeries> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, 0.003).unwrap();
    let shock = Normal::new(0.0, 0.003).unwrap();
    let n = 168;
    let cycles: Vec<f64> = (1..=n).map(f64::from).collect();
    let mut rough = 0.0;
    let caps = cycles
        .iter()
        .map(|&x| {
            rough = 0.5 * rough + shock.sample(&mut rng);
            let fade = 0.29 * ((x - 1.0) / 167.0).powf(1.1) + 0.012 * (1.0 - (-(x - 1.0) / 8.0).exp());
            let regen: f64 = A1_REST
                .iter()
                .filter(|(at, _)| x > *at)
                .map(|(at, amp)| amp * (-(x - at - 1.0) / 4.0).exp())
                .sum();
            1.8565 * (1.0 - fade + regen + rough + noise.sample(&mut rng))
        })
        .collect();
    CapacitySeries::new("A1", cycles, caps)
}

fn b_curve(x: f64) -> f64 {
    1.0 - 0.25 * ((1.2 * x / 150.0).exp() - 1.0) / (1.2f64.exp() - 1.0)
}

/// Exponential fade over 150 cycles. Between cycles 50 and 68 the capacity
/// holds still, then catches up with the exponential trend by cycle 85.
pub fn dataset_b(seed: u64) -> Result<CapacitySeries> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, 0.005).unwrap();
    let (hold, release, rejoin) = (50.0, 68.0, 85.0);
    let cycles: Vec<f64> = (1..=150).map(f64::from).collect();
    let caps = cycles
        .iter()
        .map(|&x| {
            let base = b_curve(x);
            let lag = b_curve(hold) - b_curve(x.min(release));
            let offset = if x <= hold {
                0.0
            } else if x <= release {
                lag
            } else if x < rejoin {
                lag * (rejoin - x) / (rejoin - release)
            } else {
                0.0
            };
            1.1 * (base + offset + noise.sample(&mut rng))
        })
        .collect();
    CapacitySeries::new("B3", cycles, caps)
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// Shared fade against days: slow curved decline, a mild oscillation, a
/// sharp drop near day 125 and a steeper decline afterwards.
fn c_latent(t: f64) -> f64 {
    1.0 - 0.13 * (t / 120.0).powf(1.3) + 0.012 * (2.0 * std::f64::consts::PI * t / 45.0).sin()
        - 0.16 * sigmoid((t - 125.0) / 3.0)
        - 0.0015 * (t - 130.0).max(0.0)
}

fn ragged_days(rng: &mut ChaCha8Rng, end: f64) -> Vec<f64> {
    let mut days = vec![0.0];
    let mut t = 0.0;
    loop {
        t += rng.gen_range(3.0..5.0);
        if t > end {
            break;
        }
        days.push((t * 100.0f64).round() / 100.0);
    }
    days
}

/// Cells C1 to C3. C2 follows C3 closely; C1 ages on a stretched clock, so
/// its drop comes later and its fade is slightly steeper.
pub fn dataset_c(seed: u64) -> Result<Fleet> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, 0.003).unwrap();
    let mut cells = Vec::new();
    type Shape = (&'static str, f64, fn(f64) -> f64);
    let shapes: [Shape; 3] = [
        ("C1", 185.0, |t| 1.0 + 1.05 * (c_latent(0.88 * t + 4.0) - 1.0) + 0.01 * (t / 23.0).sin()),
        ("C2", 175.0, |t| c_latent(t) - 0.01 * t / 170.0 + 0.004 * (t / 7.0).sin()),
        ("C3", 170.0, c_latent),
    ];
    for (id, end, shape) in shapes {
        let days = ragged_days(&mut rng, end);
        let caps = days.iter().map(|&t| 2.1 * (shape(t) + noise.sample(&mut rng))).collect();
        cells.push(CapacitySeries::new(id, days, caps)?);
    }
    Fleet::new(cells)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prognostics::find_eol;

    #[test]
    fn a1_shape() {
        let a1 = cell_a1(A1_SEED).unwrap();
        assert_eq!(a1.len(), 168);
        assert!((a1.raw_initial_capacity() - 1.8565).abs() < 0.02);
        let end = a1.capacities()[167];
        assert!((0.66..0.72).contains(&end), "{end}");
        let eol = find_eol(a1.cycles(), a1.capacities(), 0.7, 0.0);
        assert!((140.0..168.0).contains(&eol), "{eol}");
        // regeneration after a rest
        assert!(a1.capacities()[89] > a1.capacities()[87] + 0.01);
    }

    #[test]
    fn b_shape() {
        let b = dataset_b(B_SEED).unwrap();
        let eol = find_eol(b.cycles(), b.capacities(), B_EOL, 0.0);
        assert!((120.0..140.0).contains(&eol), "{eol}");
        let y = b.capacities();
        let plateau = (y[55..67].iter().sum::<f64>() / 12.0) - (y[47..52].iter().sum::<f64>() / 5.0);
        assert!(plateau.abs() < 0.006, "{plateau}");
    }

    #[test]
    fn c_shape() {
        let c = dataset_c(C_SEED).unwrap();
        assert_eq!(c.len(), 3);
        let c3 = c.get("C3").unwrap();
        assert!(!c3.has_integer_cycles());
        let eol = find_eol(c3.cycles(), c3.capacities(), C_EOL, 0.0);
        assert!((115.0..150.0).contains(&eol), "{eol}");
        let c1 = c.get("C1").unwrap();
        assert!(find_eol(c1.cycles(), c1.capacities(), C_EOL, 0.0) > eol);
    }

    #[test]
    fn generators_are_deterministic() {
        assert_eq!(cell_a1(1).unwrap(), cell_a1(1).unwrap());
        assert_ne!(cell_a1(1).unwrap(), cell_a1(2).unwrap());
        assert_eq!(dataset_c(4).unwrap(), dataset_c(4).unwrap());
    }
}
