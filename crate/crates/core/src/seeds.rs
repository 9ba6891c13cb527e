//! Counter-based seed derivation.
//!
//! A run's master seed fans out into independent named streams by hashing
//! `(master, stream, index)` through SplitMix64. Each stream can be
//! reproduced on its own without replaying any other.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Named sub-streams derived from a master seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u64)]
pub enum Stream {
    Init = 1,
    Partition = 2,
    Latency = 3,
    Projection = 4,
    Shuffle = 5,
    Split = 6,
    Calibration = 7,
    Admission = 8,
    Probe = 9,
    Data = 10,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derives the seed of `stream` (and an optional per-item `index`) from `master`.
pub fn derive(master: u64, stream: Stream, index: u64) -> u64 {
    let a = splitmix64(master);
    let b = splitmix64(a ^ (stream as u64).wrapping_mul(0xd6e8_feb8_6659_fd93));
    splitmix64(b ^ index.wrapping_mul(0xa076_1d64_78bd_642f))
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn stream_rng(master: u64, stream: Stream, index: u64) -> ChaCha8Rng {
    rng(derive(master, stream, index))
}
