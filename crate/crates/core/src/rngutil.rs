//! Deterministic, platform-independent randomness plumbing.
//!
//! Every random decision in the crate draws from a ChaCha stream keyed by a
//! user seed plus a purpose label ("gen-init", "data-shuffle", ...). Separate
//! streams keep components independent: enabling or disabling one module never
//! shifts the draws another module sees, which is what makes ablation variants
//! bit-comparable.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// 64-bit FNV-1a over arbitrary bytes. Used for stream derivation and config
/// digests; not cryptographic.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Derives an independent RNG stream from `(seed, label)`.
pub fn derive_rng(seed: u64, label: &str) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    let mut h = fnv1a64(&seed.to_le_bytes());
    h = h ^ fnv1a64(label.as_bytes());
    for chunk in key.chunks_mut(8) {
        h = fnv1a64(&h.to_le_bytes());
        chunk.copy_from_slice(&h.to_le_bytes());
    }
    ChaCha8Rng::from_seed(key)
}

/// Derives a per-item sub-seed, e.g. one per generated image.
pub fn derive_seed(seed: u64, label: &str, index: u64) -> u64 {
    let mut buf = Vec::with_capacity(label.len() + 16);
    buf.extend_from_slice(&seed.to_le_bytes());
    buf.extend_from_slice(label.as_bytes());
    buf.extend_from_slice(&index.to_le_bytes());
    fnv1a64(&buf)
}
