//! Seed-derived RNG streams. Every consumer gets its own stream keyed by a
//! seed and a short path of integers; there is no global generator.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Stream = ChaCha8Rng;

#[inline]
fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives an independent stream from `seed` and a key path such as
/// `[purpose, epoch, case_index]`.
pub fn stream(seed: u64, path: &[u64]) -> Stream {
    let mut h = splitmix(seed);
    for &p in path {
        h = splitmix(h ^ splitmix(p.wrapping_add(0x51_7CC1_B727_220A)));
    }
    ChaCha8Rng::seed_from_u64(h)
}

/// Stream purposes, used as the first element of a key path.
pub mod purpose {
    pub const PHANTOM: u64 = 1;
    pub const CROP: u64 = 2;
    pub const MASK: u64 = 3;
    pub const INIT: u64 = 4;
    pub const SHUFFLE: u64 = 5;
    pub const FINETUNE_CROP: u64 = 6;
    pub const PERMUTATION: u64 = 7;
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::RngExt;

    #[test]
    fn streams_are_reproducible_and_distinct() {
        let a: u64 = stream(7, &[1, 2]).random();
        let b: u64 = stream(7, &[1, 2]).random();
        let c: u64 = stream(7, &[2, 1]).random();
        let d: u64 = stream(8, &[1, 2]).random();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_ne!(a, d);
    }
}
