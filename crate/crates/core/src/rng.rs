//! Keyed random streams.
//!
//! Every random draw in a simulation comes from a ChaCha stream whose seed is
//! derived from the master seed, a purpose tag and a tuple of indices (round,
//! node, peer...). Draws therefore never depend on the order in which a
//! strategy happens to consume randomness, which keeps availability and packet
//! loss identical across strategies for a given seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Purpose tags. Distinct tags give statistically independent streams.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Ports = 1,
    Vessels = 2,
    Gaps = 3,
    CarbonPhase = 4,
    CarbonNoise = 5,
    Availability = 6,
    Participation = 7,
    PacketLoss = 8,
    LocalTraining = 9,
    Fleet = 10,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Folds `seed`, `stream` and `keys` into a single 64-bit stream seed.
pub fn derive_seed(seed: u64, stream: Stream, keys: &[u64]) -> u64 {
    let mut acc = splitmix64(seed ^ splitmix64(stream as u64));
    for &k in keys {
        acc = splitmix64(acc ^ splitmix64(k.wrapping_add(0x632B_E59B_D9B4_E019)));
    }
    acc
}

pub fn keyed_rng(seed: u64, stream: Stream, keys: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, stream, keys))
}
