//! Seeded RNG streams.
//!
//! Every consumer derives its own generator from a seed plus a path of
//! integers (epoch, batch index, pair index, ...), so work can be split or
//! reordered without changing results.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes a seed and a stream path into a single 64-bit key.
pub fn derive_key(seed: u64, path: &[u64]) -> u64 {
    path.iter()
        .fold(splitmix64(seed), |acc, &p| splitmix64(acc ^ splitmix64(p)))
}

pub fn stream(seed: u64, path: &[u64]) -> StreamRng {
    ChaCha8Rng::seed_from_u64(derive_key(seed, path))
}

/// Domain tags keep streams for unrelated purposes apart.
pub mod tag {
    pub const EPOCH_ORDER: u64 = 0x01;
    pub const PAIR: u64 = 0x02;
    pub const INIT: u64 = 0x03;
    pub const SPLIT: u64 = 0x04;
    pub const SYNTH: u64 = 0x05;
    pub const NOISE: u64 = 0x06;
    pub const PROBE: u64 = 0x07;
    pub const FINETUNE: u64 = 0x08;
    pub const GRADCHECK: u64 = 0x09;
}
