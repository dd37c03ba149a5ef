//! Seeded randomness. Every stochastic choice in the crate draws from a
//! [`ChaCha8Rng`] derived from an explicit seed so runs replay exactly.

use rand::{Rng, SeedableRng};
pub use rand_chacha::ChaCha8Rng;

use crate::autograd::Tensor;

pub fn seeded(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Independent stream for a named purpose under one run seed.
pub fn stream(seed: u64, purpose: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(purpose);
    rng
}

/// Uniform draws in `[-bound, bound]`.
pub fn uniform(rng: &mut impl Rng, shape: &[usize], bound: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-bound..=bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape from caller")
}

/// Glorot-style bound `sqrt(6 / (fan_in + fan_out))`.
pub fn fan_bound(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}
