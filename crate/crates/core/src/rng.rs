//! Seed derivation for reproducible, order-independent trials.
//!
//! Every random stream is a ChaCha8 generator keyed by a 64-bit seed derived
//! statelessly from the master seed and the job coordinates, so a trial's
//! output never depends on which thread ran it or in which order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Generator used for every random stream in the crate.
pub type StreamRng = ChaCha8Rng;

/// SplitMix64 finaliser.
fn mix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Hash an ordered list of words into one seed.
pub fn derive_seed(parts: &[u64]) -> u64 {
    parts
        .iter()
        .fold(0x5EED_0F_C0FF_EE00_u64, |acc, &p| mix64(acc ^ mix64(p)))
}

/// Named sub-streams of a single trial seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Features = 1,
    Labels = 2,
    Poison = 3,
    TestPoints = 4,
    Direction = 5,
    Subsample = 6,
}

pub fn stream(seed: u64, which: Stream) -> StreamRng {
    StreamRng::seed_from_u64(derive_seed(&[seed, which as u64]))
}
