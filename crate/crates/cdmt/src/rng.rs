//! Deterministic sub-stream derivation.
//!
//! Every stochastic stage derives its own rng from (master seed, label,
//! indices) so that trajectories are reproducible and independent of how
//! work is batched or resumed.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Derive an independent rng for (seed, label, a, b).
pub fn derive(seed: u64, label: &str, a: u64, b: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[0..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&fnv1a(label.as_bytes()).to_le_bytes());
    key[16..24].copy_from_slice(&a.to_le_bytes());
    key[24..32].copy_from_slice(&b.to_le_bytes());
    ChaCha8Rng::from_seed(key)
}
