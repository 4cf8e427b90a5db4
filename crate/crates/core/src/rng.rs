//! Seeded random number generation shared by every stochastic component.

use rand::{Rng as _, SeedableRng};
use rand_distr::{Distribution, StandardNormal};

/// The generator used throughout the crate. ChaCha8 is portable and its
/// stream is stable across platforms and releases.
pub type Rng = rand_chacha::ChaCha8Rng;

pub fn seeded(seed: u64) -> Rng {
    Rng::seed_from_u64(seed)
}

#[inline]
pub fn normal(rng: &mut Rng) -> f64 {
    StandardNormal.sample(rng)
}

#[inline]
pub fn uniform(rng: &mut Rng, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * rng.random::<f64>()
}

/// Uniform integer in `lo..=hi`.
#[inline]
pub fn int_inclusive(rng: &mut Rng, lo: usize, hi: usize) -> usize {
    rng.random_range(lo..=hi)
}

/// Derives an independent child stream. Used to give each day, step or
/// grid point its own generator without consuming the parent stream in a
/// data-dependent way.
pub fn split(rng: &mut Rng) -> Rng {
    Rng::seed_from_u64(rng.random::<u64>())
}
