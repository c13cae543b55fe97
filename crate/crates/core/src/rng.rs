//! Seed derivation. Every random stream in the crate is a ChaCha8 generator
//! keyed by a master seed and a list of counters, so parallel work stays
//! reproducible.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Named streams derived from one seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Nominal = 1,
    ProposalNoise = 2,
    NormConst = 3,
    Acceptance = 4,
    Particles = 5,
    Parameters = 6,
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes a seed with a sequence of counters.
pub fn derive_seed(seed: u64, parts: &[u64]) -> u64 {
    parts
        .iter()
        .fold(splitmix(seed), |acc, &p| splitmix(acc ^ splitmix(p)))
}

/// Stable identifier for a string label (FNV-1a).
pub fn label_id(label: &str) -> u64 {
    label.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01B3)
    })
}

pub fn stream(seed: u64, stream: Stream) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, &[stream as u64]))
}

pub fn substream(seed: u64, stream: Stream, counters: &[u64]) -> ChaCha8Rng {
    let mut parts = Vec::with_capacity(counters.len() + 1);
    parts.push(stream as u64);
    parts.extend_from_slice(counters);
    ChaCha8Rng::seed_from_u64(derive_seed(seed, &parts))
}
