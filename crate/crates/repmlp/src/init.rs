//! Deterministic seeded weight initialization.
//!
//! Weights draw from a He-style fan-in-scaled uniform; batch-norm parameters
//! start as a jittered near-identity so fusion paths are exercised without
//! destabilizing deep forwards. Layers that feed a residual sum accept an
//! extra gain so activations stay O(1) through many blocks (the equivalence
//! tolerances are absolute, so magnitudes matter).

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::layers::{BnParams, BN_EPS};

pub(crate) type SeededRng = ChaCha8Rng;

pub(crate) fn rng_from_seed(seed: u64) -> SeededRng {
    use rand::SeedableRng;
    ChaCha8Rng::seed_from_u64(seed)
}

/// `len` samples from `U(-b, b)` with `b = gain * sqrt(6 / fan_in)`.
pub(crate) fn fan_in_uniform(
    rng: &mut SeededRng,
    len: usize,
    fan_in: usize,
    gain: f32,
) -> Vec<f32> {
    let b = gain * (6.0 / fan_in.max(1) as f32).sqrt();
    (0..len).map(|_| rng.gen_range(-b..b)).collect()
}

pub(crate) fn small_bias(rng: &mut SeededRng, len: usize, fan_in: usize) -> Vec<f32> {
    let b = 1.0 / (fan_in.max(1) as f32).sqrt();
    (0..len).map(|_| rng.gen_range(-b..b)).collect()
}

pub(crate) fn jittered_bn(rng: &mut SeededRng, len: usize) -> BnParams {
    let mean = (0..len).map(|_| rng.gen_range(-0.1..0.1)).collect();
    let var = (0..len).map(|_| rng.gen_range(0.81..1.21)).collect();
    let gamma = (0..len).map(|_| rng.gen_range(0.9..1.1)).collect();
    let beta = (0..len).map(|_| rng.gen_range(-0.1..0.1)).collect();
    BnParams::from_stats(mean, var, gamma, beta, BN_EPS).expect("jitter variance is positive")
}
