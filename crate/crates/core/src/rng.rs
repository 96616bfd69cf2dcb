//! Seed derivation and the counter-based uniform generator used for sampling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(GOLDEN);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes a base seed with a sequence of stream identifiers into a new seed.
///
/// Distinct `parts` give statistically independent streams; the mapping is
/// a pure function so every derived seed is reproducible.
pub fn derive_seed(base: u64, parts: &[u64]) -> u64 {
    parts
        .iter()
        .fold(splitmix64(base), |acc, &p| splitmix64(acc ^ splitmix64(p)))
}

/// Uniform draw in `[0, 1)` keyed by `(seed, position)`.
pub fn counter_uniform(seed: u64, position: u64) -> f64 {
    let bits = derive_seed(seed, &[position]);
    // top 53 bits -> exactly representable dyadic in [0, 1)
    (bits >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Stream RNG for everything that is not per-position token sampling.
pub fn stream(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
