//! Seed derivation and deterministic random streams.
//!
//! Every random decision in the crate draws from a [`ChaCha8Rng`] stream
//! derived from a root seed and a purpose tag, so adding or removing one
//! consumer never shifts the draws seen by another. Corpus generation,
//! model init, and batch sampling all get independent streams.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Mix a root seed with a purpose tag into a new 64-bit seed (FNV-1a over
/// the tag bytes, folded into the seed with an avalanche finisher).
pub fn derive_seed(root: u64, tag: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in tag.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    splitmix(root ^ h)
}

/// Derive a seed that also depends on an index (per-utterance, per-run...).
pub fn derive_seed_indexed(root: u64, tag: &str, index: u64) -> u64 {
    splitmix(derive_seed(root, tag) ^ splitmix(index.wrapping_add(0x9e37_79b9_7f4a_7c15)))
}

/// A deterministic stream for the given root seed and purpose tag.
pub fn stream(root: u64, tag: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(root, tag))
}

/// A deterministic stream keyed by seed, tag, and index.
pub fn stream_indexed(root: u64, tag: &str, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed_indexed(root, tag, index))
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Standard normal draw via Box-Muller, consuming exactly two uniforms.
pub fn normal(rng: &mut ChaCha8Rng) -> f64 {
    use rand::Rng;
    let u1: f64 = rng.random::<f64>().max(1e-300);
    let u2: f64 = rng.random::<f64>();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}
