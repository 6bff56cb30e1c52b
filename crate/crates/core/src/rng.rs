//! Seed derivation for order-independent substreams.
//!
//! Every run gets its own ChaCha8 stream whose seed is a hash of the base
//! seed and the run's coordinates, so results never depend on the order in
//! which runs are scheduled.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type LabRng = ChaCha8Rng;

#[inline]
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes `base` with an ordered list of coordinates into a new 64-bit seed.
pub fn derive_seed(base: u64, parts: &[u64]) -> u64 {
    let mut h = splitmix64(base);
    for &p in parts {
        h = splitmix64(h ^ splitmix64(p.wrapping_add(0x632B_E59B_D9B4_E019)));
    }
    h
}

/// Named substreams so that e.g. the init and data streams of one run never collide.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Init = 1,
    Data = 2,
    Test = 3,
    Batches = 4,
    Aux = 5,
}

pub fn stream_rng(seed: u64, stream: Stream) -> LabRng {
    LabRng::seed_from_u64(derive_seed(seed, &[stream as u64]))
}
