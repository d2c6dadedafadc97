//! Seeded random streams.
//!
//! Every experiment draws from ChaCha8 streams keyed by
//! `(experiment, seed, purpose)`, so adding a new consumer of randomness never
//! perturbs the draws of an existing one.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Stream = ChaCha8Rng;

/// Purposes used to key sub-streams.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u64)]
pub enum Purpose {
    Tables = 1,
    Labels = 2,
    Noise = 3,
    Split = 4,
    Partition = 5,
    CpInit = 6,
    Model = 7,
    Observation = 8,
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn fnv1a(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0100_0000_01b3)
    })
}

/// Opens the sub-stream for `(experiment, seed, purpose)`.
pub fn stream(experiment: &str, seed: u64, purpose: Purpose) -> Stream {
    let key = splitmix(fnv1a(experiment) ^ splitmix(seed));
    let mut rng = ChaCha8Rng::seed_from_u64(key);
    rng.set_stream(purpose as u64);
    rng
}

/// Plain seeded stream for callers that manage their own keys.
pub fn seeded(seed: u64) -> Stream {
    ChaCha8Rng::seed_from_u64(splitmix(seed))
}
