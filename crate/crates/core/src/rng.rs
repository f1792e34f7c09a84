use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng_from_seed(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Builds a generator keyed directly on a 32-byte digest, bypassing any
/// seed-expansion helper so the stream depends only on the ChaCha8 algorithm.
pub fn rng_from_digest(digest: [u8; 32]) -> ChaCha8Rng {
    ChaCha8Rng::from_seed(digest)
}

/// Uniform draw in `[lo, hi)` with an explicit bit mapping: the top 53 bits
/// of one `u64` scaled by 2^-53. Written out long-hand so stored values never
/// depend on a distribution crate's internals.
pub fn uniform_f64<R: RngCore>(rng: &mut R, lo: f64, hi: f64) -> f64 {
    let unit = (rng.next_u64() >> 11) as f64 * 2f64.powi(-53);
    lo + (hi - lo) * unit
}
