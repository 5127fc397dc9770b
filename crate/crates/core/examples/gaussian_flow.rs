//! Rectified-flow sampling with an exact velocity field.
//!
//! For data x0 ~ N(m, s²) and noise x1 ~ N(0, 1) along x_t = (1−t)x0 + t·x1,
//! the optimal velocity E[x1 − x0 | x_t] is affine in x_t. Integrating it with
//! Euler from pure noise recovers the data distribution.
//!
//! cargo run --example gaussian_flow

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use volflow::flow::{euler_integrate, SamplerConfig};

const M: f64 = 2.0;
const S: f64 = 0.5;

fn velocity(x: f64, t: f64) -> f64 {
    let a = 1.0 - t;
    let slope = (t - a * S * S) / (a * a * S * S + t * t);
    let intercept = -M - slope * a * M;
    slope * x + intercept
}

fn moments(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    (mean, xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n)
}

fn main() -> anyhow::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let noise: Vec<f64> = (0..20_000).map(|_| StandardNormal.sample(&mut rng)).collect();
    println!("target mean {M} var {}", S * S);
    for steps in [1, 2, 5, 20, 100, 500] {
        let cfg = SamplerConfig::new(steps)?;
        let out = euler_integrate(noise.clone(), &cfg, |x, t| Ok(x.iter().map(|&xi| velocity(xi, t)).collect()))?;
        let (mean, var) = moments(&out);
        println!("{steps:>4} Euler steps: mean {mean:.4} var {var:.4}");
    }
    Ok(())
}
