//! Deterministic RNG stream derivation.
//!
//! Every random draw in the pipeline comes from a ChaCha stream keyed by the
//! master seed plus a domain tag and optional indices (bus id, trajectory
//! index, round number). Parallel and serial execution therefore see the
//! same streams, and a rerun from the same config reproduces every file
//! byte for byte.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;

/// Domain tags keeping unrelated streams statistically independent.
pub mod tag {
    pub const SCENARIO: u64 = 0x5343_454e;
    pub const TRAJECTORY: u64 = 0x5452_414a;
    pub const TRIPLET: u64 = 0x5452_4950;
    pub const MODEL_INIT: u64 = 0x494e_4954;
    pub const FOURIER: u64 = 0x464f_5552;
    pub const BATCH: u64 = 0x4241_5443;
    pub const SPLIT: u64 = 0x5350_4c54;
}

fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes the master seed with a list of tags into a 256-bit ChaCha key.
pub fn derive_seed(master: u64, tags: &[u64]) -> [u8; 32] {
    let mut x = splitmix64(master);
    for &t in tags {
        x = splitmix64(x ^ splitmix64(t));
    }
    let mut seed = [0u8; 32];
    for chunk in seed.chunks_mut(8) {
        x = splitmix64(x);
        chunk.copy_from_slice(&x.to_le_bytes());
    }
    seed
}

/// Independent RNG stream for (master seed, tags).
pub fn stream(master: u64, tags: &[u64]) -> ChaCha12Rng {
    ChaCha12Rng::from_seed(derive_seed(master, tags))
}
