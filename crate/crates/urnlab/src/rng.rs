//! Deterministic random-number streams.
//!
//! Every consumer of randomness gets its own ChaCha8 stream addressed by a
//! `(key, stream)` pair: replica r of an ensemble derives a child key from
//! the master seed and r, urn i's initial draw uses stream i of that key,
//! and the event loop uses a reserved stream. Results therefore depend only
//! on the master seed and the replica index, never on scheduling, worker
//! count, or iteration order.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream id reserved for the per-replica event loop (urn init uses ids 0..N).
pub const EVENT_STREAM: u64 = u64::MAX;

/// splitmix64 finalizer; full-period bijection on u64 with good diffusion.
pub fn mix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// A point in the seed-derivation tree.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SeedKey(u64);

impl SeedKey {
    pub fn new(seed: u64) -> Self {
        SeedKey(seed)
    }

    /// The raw seed, for echoing into reports and manifests.
    pub fn value(self) -> u64 {
        self.0
    }

    /// Child key for e.g. replica `salt`; injective in `salt` for fixed parent.
    pub fn child(self, salt: u64) -> SeedKey {
        SeedKey(mix64(
            self.0 ^ mix64(salt.wrapping_add(0x517c_c1b7_2722_0a95)),
        ))
    }

    /// Generator for one numbered stream under this key.
    pub fn stream(self, stream: u64) -> ChaCha8Rng {
        let mut seed = [0u8; 32];
        let mut word = self.0;
        for chunk in seed.chunks_exact_mut(8) {
            word = mix64(word);
            chunk.copy_from_slice(&word.to_le_bytes());
        }
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(stream);
        rng
    }
}
