// SPDX-License-Identifier: MIT OR Apache-2.0

//! Seeded randomness. Every random draw in the crate comes from a ChaCha8
//! stream keyed by a `u64` seed, so results are reproducible across
//! platforms.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

pub type LabRng = ChaCha8Rng;

pub fn seeded(seed: u64) -> LabRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Independent stream derived from `seed` and a purpose tag.
pub fn derived(seed: u64, stream: u64) -> LabRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// `n` draws from `N(0, std^2)`.
pub fn normal_vec(rng: &mut LabRng, n: usize, std: f64) -> Vec<f64> {
    let dist = Normal::new(0.0, std).expect("std must be finite and >= 0");
    (0..n).map(|_| dist.sample(rng)).collect()
}
