//! Deterministic seed derivation and named random streams.
//!
//! Every random decision in the crate flows from a base seed through
//! [`derive_seed`] (a stable FNV-1a hash of a canonical string) into a
//! counter-based ChaCha stream selected by [`rng_stream`]. Nothing reads
//! global RNG state, so results are reproducible across processes and
//! worker counts.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const FNV_OFFSET: u64 = 0xcbf29ce484222325;
const FNV_PRIME: u64 = 0x100000001b3;

pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut hash = FNV_OFFSET;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(FNV_PRIME);
    }
    hash
}

/// Stable seed for (base, label, index), e.g. (base, config id, repetition).
pub fn derive_seed(base: u64, label: &str, index: u64) -> u64 {
    let canonical = format!("base:{base}|{label}|idx:{index}");
    fnv1a(canonical.as_bytes())
}

/// Independent named stream of a counter-based generator.
pub fn rng_stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}
