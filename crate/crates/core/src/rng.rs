//! Splittable seeding: every random stream is derived from one root seed and
//! a path of integer tags, so streams never depend on evaluation order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream tags. Keeping them in one place avoids accidental reuse.
pub mod stream {
    pub const CODEWORDS: u64 = 1;
    pub const SPEAKERS: u64 = 2;
    pub const CORPUS: u64 = 3;
    pub const UTTERANCE: u64 = 4;
    pub const ENCODE_NOISE: u64 = 5;
    pub const INIT: u64 = 6;
    pub const STEP: u64 = 7;
    pub const ITEM: u64 = 8;
    pub const SAMPLE: u64 = 9;
    pub const EVAL: u64 = 10;
    pub const TEST_SPLIT: u64 = 11;
    pub const VERIFY: u64 = 12;
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives a child seed from `root` and a tag path.
pub fn derive(root: u64, path: &[u64]) -> u64 {
    path.iter().fold(splitmix(root), |acc, &tag| splitmix(acc ^ splitmix(tag)))
}

pub fn stream_rng(root: u64, path: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(root, path))
}
