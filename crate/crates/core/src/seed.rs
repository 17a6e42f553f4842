//! Seed derivation for independent, schedule-free RNG streams.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type SeedRng = ChaCha8Rng;

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(GOLDEN);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes a master seed with a path of stream coordinates, e.g. `(season, student)`.
pub fn derive_seed(master: u64, path: &[u64]) -> u64 {
    path.iter().fold(splitmix64(master), |acc, &p| {
        splitmix64(acc ^ splitmix64(p))
    })
}

pub fn rng_from(master: u64, path: &[u64]) -> SeedRng {
    SeedRng::seed_from_u64(derive_seed(master, path))
}
