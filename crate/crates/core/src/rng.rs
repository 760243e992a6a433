//! Seeded random substreams.
//!
//! Every source of randomness in the crate is a [`ChaCha8Rng`] derived from a
//! master seed, a purpose tag and a list of indices. The derivation is a fixed
//! SplitMix64 chain, so substreams are identical on every platform and do not
//! depend on scheduling order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// The generator used throughout the crate.
pub type Stream = ChaCha8Rng;

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(GOLDEN);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes a seed, a tag and indices into a single 64-bit key.
pub fn derive_key(seed: u64, tag: &str, indices: &[u64]) -> u64 {
    let mut key = splitmix(seed);
    for byte in tag.bytes() {
        key = splitmix(key ^ u64::from(byte));
    }
    // separator so that ("ab", [1]) and ("a", [98, 1]) cannot collide trivially
    key = splitmix(key ^ 0xFF);
    for &i in indices {
        key = splitmix(key ^ i);
    }
    key
}

/// Opens the substream for `(seed, tag, indices)`.
pub fn substream(seed: u64, tag: &str, indices: &[u64]) -> Stream {
    Stream::seed_from_u64(derive_key(seed, tag, indices))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn substreams_are_reproducible() {
        let a: Vec<u64> = substream(7, "init", &[1, 2]).random_iter().take(4).collect();
        let b: Vec<u64> = substream(7, "init", &[1, 2]).random_iter().take(4).collect();
        assert_eq!(a, b);
    }

    #[test]
    fn distinct_tags_and_indices_diverge() {
        let base = derive_key(7, "init", &[1, 2]);
        assert_ne!(base, derive_key(7, "inif", &[1, 2]));
        assert_ne!(base, derive_key(7, "init", &[2, 1]));
        assert_ne!(base, derive_key(8, "init", &[1, 2]));
        assert_ne!(derive_key(0, "ab", &[1]), derive_key(0, "a", &[98, 1]));
    }

    #[test]
    fn key_derivation_is_pinned() {
        // Frozen so that a change to the mixing chain is caught: it would
        // silently change every dataset and run log.
        assert_eq!(splitmix(0), 0xE220_A839_7B1D_CDAF);
    }
}
