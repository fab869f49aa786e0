//! Deterministic RNG stream derivation.
//!
//! Every random decision in a run draws from a stream keyed by
//! `(experiment seed, purpose, indices...)`. Streams never share state, so
//! results do not depend on evaluation order or thread count.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

/// Purpose tags for independent RNG streams.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Purpose {
    Init = 1,
    Stream = 2,
    Corruption = 3,
    Buffer = 4,
    BufferDraw = 5,
    Pairing = 6,
    Bridge = 7,
    FeynmanKac = 8,
    Lipschitz = 9,
    Instance = 10,
}

#[inline]
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mix a seed with a purpose and any number of indices into a 64-bit key.
pub fn derive_key(seed: u64, purpose: Purpose, indices: &[u64]) -> u64 {
    let mut h = splitmix64(seed ^ 0x5043_4C5F_5345_4544);
    h = splitmix64(h ^ purpose as u64);
    for &i in indices {
        h = splitmix64(h ^ i);
    }
    h
}

pub fn stream_rng(seed: u64, purpose: Purpose, indices: &[u64]) -> StreamRng {
    StreamRng::seed_from_u64(derive_key(seed, purpose, indices))
}
