//! Splittable seed derivation.
//!
//! Every random stream in the simulator is addressed by a root seed plus a
//! path of indices (realization, step, ...). Streams for different paths are
//! independent, and adding new paths never perturbs existing ones.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// The generator used for every simulation stream.
pub type SimRng = ChaCha8Rng;

const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

fn splitmix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives a child seed from `seed` and an index path.
pub fn derive_seed(seed: u64, path: &[u64]) -> u64 {
    path.iter().fold(splitmix64(seed.wrapping_add(GOLDEN_GAMMA)), |acc, &idx| {
        splitmix64(acc ^ splitmix64(idx.wrapping_add(GOLDEN_GAMMA)).rotate_left(17))
    })
}

/// Builds the RNG for a given stream path.
pub fn stream_rng(seed: u64, path: &[u64]) -> SimRng {
    SimRng::seed_from_u64(derive_seed(seed, path))
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::collections::BTreeSet;
    use rand::Rng;

    #[test]
    fn derivation_is_stable_and_distinct() {
        assert_eq!(derive_seed(7, &[1, 2]), derive_seed(7, &[1, 2]));
        let seeds: BTreeSet<u64> = (0..64u64)
            .flat_map(|a| (0..64u64).map(move |b| derive_seed(7, &[a, b])))
            .collect();
        assert_eq!(seeds.len(), 64 * 64);
        assert_ne!(derive_seed(7, &[1, 2]), derive_seed(7, &[2, 1]));
        assert_ne!(derive_seed(7, &[1]), derive_seed(8, &[1]));
    }

    #[test]
    fn streams_reproduce() {
        let a: u64 = stream_rng(3, &[4]).random();
        let b: u64 = stream_rng(3, &[4]).random();
        assert_eq!(a, b);
    }
}
