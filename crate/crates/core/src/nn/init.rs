use rand::Rng;
use rand_distr::{Distribution, Normal};

/// `n` draws from N(0, gain^2 * 2 / fan_in).
pub fn he_normal(rng: &mut impl Rng, n: usize, fan_in: usize, gain: f64) -> Vec<f64> {
    let std = gain * (2.0 / fan_in as f64).sqrt();
    let dist = Normal::new(0.0, std).expect("finite std");
    (0..n).map(|_| dist.sample(rng)).collect()
}
