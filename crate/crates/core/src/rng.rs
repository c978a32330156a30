//! Deterministic random streams.
//!
//! Every consumer derives its own ChaCha20 stream from a (seed, purpose,
//! index) triple hashed into the 256-bit stream key. Streams are independent,
//! so adding or reordering consumers never perturbs the draws another one
//! sees, and a given triple produces identical draws on every platform.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha20Rng;
use sha2::{Digest, Sha256};

/// Stream for (seed, purpose, index). `purpose` is a short static label such
/// as `"phantom.tree"` or `"train.patch"`; `index` distinguishes items within
/// a purpose (case number, epoch, ...).
pub fn stream(seed: u64, purpose: &str, index: u64) -> ChaCha20Rng {
    stream_keyed(seed, purpose, &index.to_le_bytes())
}

/// Stream keyed by arbitrary bytes instead of an index (e.g. a prompt hash).
pub fn stream_keyed(seed: u64, purpose: &str, key: &[u8]) -> ChaCha20Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update([0u8]);
    h.update(purpose.as_bytes());
    h.update([0u8]);
    h.update(key);
    ChaCha20Rng::from_seed(h.finalize().into())
}
