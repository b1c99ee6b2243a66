//! Seeded synthetic data sets with known generating processes.

use rand::Rng;
use rand_distr::StandardNormal;

use super::{TabularDataset, TimeSeriesDataset};
use crate::ndcore::Tensor;
use crate::rng::{tag, NoiseStream};

fn names(prefix: &str, n: usize) -> Vec<String> {
    (0..n).map(|i| format!("{prefix}{i}")).collect()
}

/// `y = sin(2x) + x/2 + 0.2 ε`, `x ~ U(−3, 3)`.
pub fn sine(n: usize, seed: u64) -> TabularDataset {
    let mut rng = NoiseStream::new(seed).rng(&[tag::INIT, 100]);
    let x = Tensor::from_fn(n, 1, |_, _| rng.random_range(-3.0..3.0));
    let y = Tensor::from_fn(n, 1, |i, _| {
        let v = x.get(i, 0);
        (2.0 * v).sin() + 0.5 * v + 0.2 * rng.sample::<f64, _>(StandardNormal)
    });
    TabularDataset {
        feature_names: names("x", 1),
        target_names: vec!["y".into()],
        x,
        y,
    }
}

/// Three inputs pushed through correlated, state-dependent noise and read
/// out along three contrasts:
/// `z = x + s(x)·ξ·(1,1,1)/√3 + 0.05 ζ`, targets `z₀+z₁+z₂ + ½ sin 2z₀`,
/// `z₀ − z₁` and `z₁ − z₂` (each plus `0.05 ε`), with `s(x)` ramping from
/// 0.05 to 1.05 along `x₀`.
///
/// The noise moves the sum and leaves the differences untouched, which no
/// diagonal input-noise model can reproduce.
pub fn correlated_noise_regression(n: usize, seed: u64) -> TabularDataset {
    let mut rng = NoiseStream::new(seed).rng(&[tag::INIT, 101]);
    let x = Tensor::from_fn(n, 3, |_, _| rng.random_range(-2.0..2.0));
    let u = 1.0 / 3f64.sqrt();
    let mut y = Tensor::zeros(n, 3);
    for i in 0..n {
        let s = 0.05 + 1.0 / (1.0 + (-3.0 * x.get(i, 0)).exp());
        let xi: f64 = rng.sample(StandardNormal);
        let z: Vec<f64> = (0..3)
            .map(|d| x.get(i, d) + s * xi * u + 0.05 * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let clean = [z[0] + z[1] + z[2] + 0.5 * (2.0 * z[0]).sin(), z[0] - z[1], z[1] - z[2]];
        for (k, c) in clean.iter().enumerate() {
            y.set(i, k, c + 0.05 * rng.sample::<f64, _>(StandardNormal));
        }
    }
    TabularDataset {
        feature_names: names("x", 3),
        target_names: names("y", 3),
        x,
        y,
    }
}

/// Hourly observations of a 2-D Ornstein–Uhlenbeck process
/// `dx = −θx dt + C dB` with strongly correlated driving noise
/// (`CCᵀ = σ²[[1, ρ], [ρ, 1]]`), observed with small independent noise.
pub fn correlated_ou(len: usize, seed: u64) -> TimeSeriesDataset {
    let (theta, sigma2, rho, obs_sd): (f64, f64, f64, f64) = (0.3, 0.5, 0.95, 0.05);
    let c = [
        [sigma2.sqrt(), 0.0],
        [sigma2.sqrt() * rho, sigma2.sqrt() * (1.0 - rho * rho).sqrt()],
    ];
    let mut rng = NoiseStream::new(seed).rng(&[tag::INIT, 102]);
    let sub = 10;
    let dt = 1.0 / sub as f64;
    // start from the stationary marginal
    let stat = (sigma2 / (2.0 * theta)).sqrt();
    let e0: f64 = rng.sample(StandardNormal);
    let e1: f64 = rng.sample(StandardNormal);
    let mut x = [stat * e0, stat * (rho * e0 + (1.0 - rho * rho).sqrt() * e1)];
    let mut values = Tensor::zeros(len, 2);
    for t in 0..len {
        for d in 0..2 {
            values.set(t, d, x[d] + obs_sd * rng.sample::<f64, _>(StandardNormal));
        }
        for _ in 0..sub {
            let b: [f64; 2] = [rng.sample(StandardNormal), rng.sample(StandardNormal)];
            for d in 0..2 {
                x[d] += -theta * x[d] * dt + dt.sqrt() * (c[d][0] * b[0] + c[d][1] * b[1]);
            }
        }
    }
    TimeSeriesDataset {
        names: names("y", 2),
        times: (0..len).map(|t| t as f64).collect(),
        values,
        mask: vec![true; 2 * len],
    }
}
