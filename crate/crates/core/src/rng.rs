//! Seed derivation.
//!
//! Every random stage draws from its own ChaCha stream, keyed by the master
//! seed and a path of labels (stage id, repeat index, dataset index, ...).
//! Derived seeds depend only on the path, so adding repeats never perturbs the
//! streams of earlier ones.

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

pub type StageRng = ChaCha20Rng;

/// Stage labels used by the pipeline when deriving streams.
pub mod stage {
    pub const TOY_DATA: u64 = 1;
    pub const NOISE: u64 = 2;
    pub const LAPLACE: u64 = 3;
    pub const NUTS: u64 = 4;
    pub const POSTERIOR_DRAW: u64 = 5;
    pub const SYNTHETIC: u64 = 6;
    pub const BOOTSTRAP: u64 = 7;
    pub const REPEAT: u64 = 8;
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives a child seed from `seed` and a label path.
pub fn derive_seed(seed: u64, path: &[u64]) -> u64 {
    path.iter()
        .fold(splitmix64(seed), |acc, &label| splitmix64(acc ^ splitmix64(label.wrapping_add(0xA5A5_A5A5))))
}

pub fn stream(seed: u64, path: &[u64]) -> StageRng {
    StageRng::seed_from_u64(derive_seed(seed, path))
}
