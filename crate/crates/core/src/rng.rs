//! Explicit, seed-derived random streams.
//!
//! Every stochastic step gets its own generator derived from the run seed
//! and a purpose tag, so adding a consumer never shifts another stream.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// Stream purposes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Data = 1,
    BackboneInit = 2,
    Pretrain = 3,
    PromptInit = 4,
    Shuffle = 5,
    Augment = 6,
    VirtualCurrent = 7,
    VirtualPast = 8,
    ClassifierInit = 9,
    KMeans = 10,
    Diagnostics = 11,
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes a base seed with a sequence of integers.
pub fn derive_seed(base: u64, parts: &[u64]) -> u64 {
    parts.iter().fold(splitmix(base), |acc, &p| splitmix(acc ^ splitmix(p)))
}

pub fn stream(base: u64, purpose: Stream, parts: &[u64]) -> Rng {
    let mut all = Vec::with_capacity(parts.len() + 1);
    all.push(purpose as u64);
    all.extend_from_slice(parts);
    Rng::seed_from_u64(derive_seed(base, &all))
}
