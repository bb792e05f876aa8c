//! Position-keyed random streams.
//!
//! Every random decision in a run draws from a ChaCha stream whose seed is a
//! hash of `(master seed, purpose, coordinates...)`. Streams never share
//! state, so results do not depend on the order in which devices or clusters
//! are processed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// What a stream is used for. Distinct purposes never collide.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Purpose {
    Data = 1,
    Partition = 2,
    Topology = 3,
    ModelInit = 4,
    BatchSampler = 5,
    Bernoulli = 6,
    Probe = 7,
    Compression = 8,
    DeviceProfile = 9,
    DeviceRound = 10,
    FeatureShift = 11,
    Holdout = 12,
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes a master seed, a purpose tag and coordinates into one 64-bit key.
pub fn stream_key(seed: u64, purpose: Purpose, coords: &[u64]) -> u64 {
    let mut h = splitmix(seed ^ splitmix(purpose as u64));
    for &c in coords {
        h = splitmix(h ^ splitmix(c.wrapping_add(0xA5A5_A5A5)));
    }
    h
}

pub fn stream(seed: u64, purpose: Purpose, coords: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(stream_key(seed, purpose, coords))
}
