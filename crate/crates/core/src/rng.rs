//! The single PRNG contract used everywhere in the crate.
//!
//! Every random draw comes from ChaCha8 seeded through
//! `SeedableRng::seed_from_u64`, and independent streams (per sample, per
//! trial) use ChaCha's native stream selector. Normal variates use
//! `rand_distr::StandardNormal` (ziggurat). Outputs are bit-reproducible
//! for a given build; no promise is made across dependency upgrades.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub type LabRng = ChaCha8Rng;

/// Recorded in checkpoints and reports next to every seed.
pub const GENERATOR: &str = "chacha8/seed_from_u64+stream; normals: ziggurat";

pub fn seeded(seed: u64) -> LabRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Independent stream `index` under `seed`.
pub fn stream(seed: u64, index: u64) -> LabRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Mixes a tag into a seed (splitmix64 finalizer) so that sub-tasks of one
/// run draw from unrelated generators.
pub fn derive(seed: u64, tag: u64) -> u64 {
    let mut z = seed ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[inline]
pub fn normal<R: rand::Rng + ?Sized>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}

pub fn normal_vec<R: rand::Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<f64> {
    (0..n).map(|_| normal(rng)).collect()
}
