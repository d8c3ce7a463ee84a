//! Deterministic seed derivation.
//!
//! Every stage and every parallel work item draws its randomness from a
//! child seed derived from one global seed plus a label (and optionally an
//! index). Parallel and serial execution therefore consume identical
//! streams, and one number reproduces a whole experiment.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// SplitMix64 finalizer; full-avalanche mixing of a 64-bit word.
pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Child seed for a named stage, e.g. `derive_seed(seed, "datagen")`.
pub fn derive_seed(base: u64, label: &str) -> u64 {
    splitmix64(base ^ fnv1a64(label.as_bytes()))
}

/// Child seed for the `index`-th item of a named stage.
pub fn derive_seed_indexed(base: u64, label: &str, index: u64) -> u64 {
    splitmix64(derive_seed(base, label) ^ splitmix64(index))
}

/// The one RNG used throughout: portable and reproducible across platforms.
pub fn rng_from(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// `n` standard-normal draws from an existing stream.
pub fn standard_normal_vec(rng: &mut impl rand::Rng, n: usize) -> Vec<f64> {
    use rand_distr::Distribution;
    let normal = rand_distr::Normal::new(0.0, 1.0).unwrap();
    (0..n).map(|_| normal.sample(rng)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn derivation_is_stable_and_label_sensitive() {
        assert_eq!(derive_seed(17, "datagen"), derive_seed(17, "datagen"));
        assert_ne!(derive_seed(17, "datagen"), derive_seed(17, "vae"));
        assert_ne!(derive_seed(17, "datagen"), derive_seed(18, "datagen"));
        assert_ne!(
            derive_seed_indexed(17, "field", 0),
            derive_seed_indexed(17, "field", 1)
        );
    }

    #[test]
    fn rng_streams_are_reproducible() {
        use rand::Rng;
        let mut a = rng_from(derive_seed(7, "x"));
        let mut b = rng_from(derive_seed(7, "x"));
        for _ in 0..16 {
            assert_eq!(a.random::<u64>(), b.random::<u64>());
        }
    }
}
