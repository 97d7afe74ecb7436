//! Seed derivation for independent, reproducible random streams.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream tags keep training, validation and evaluation task draws apart.
pub mod stream {
    pub const TRAIN_POOL: u64 = 1;
    pub const VALIDATION: u64 = 2;
    pub const EVALUATION: u64 = 3;
    pub const BATCH: u64 = 4;
    pub const METADATA: u64 = 5;
    pub const INIT: u64 = 6;
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes a base seed with a stream tag and an index.
pub fn derive(base: u64, stream: u64, index: u64) -> u64 {
    splitmix64(splitmix64(splitmix64(base) ^ stream) ^ index)
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn streams_do_not_collide() {
        let a = derive(7, stream::TRAIN_POOL, 0);
        let b = derive(7, stream::EVALUATION, 0);
        let c = derive(7, stream::TRAIN_POOL, 1);
        assert!(a != b && a != c && b != c);
        assert_eq!(a, derive(7, stream::TRAIN_POOL, 0));
    }
}
