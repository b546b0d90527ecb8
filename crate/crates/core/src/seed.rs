//! Named sub-seed derivation.
//!
//! Every random stream in the pipeline is derived from one base seed plus a
//! purpose string (and optionally an index), so that independent stages and
//! parallel workers never share a generator yet stay reproducible.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Stable hash of `(seed, purpose)`; does not depend on the std hasher.
pub fn sub_seed(seed: u64, purpose: &str) -> u64 {
    let mut h = FNV_OFFSET;
    for b in purpose.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(FNV_PRIME);
    }
    splitmix64(seed ^ splitmix64(h))
}

/// Stable hash of `(seed, index)`, used for per-instance and per-replicate streams.
pub fn indexed_seed(seed: u64, index: u64) -> u64 {
    splitmix64(seed ^ splitmix64(index.wrapping_add(0x5851_f42d_4c95_7f2d)))
}

pub fn rng_for(seed: u64, purpose: &str) -> Rng {
    Rng::seed_from_u64(sub_seed(seed, purpose))
}

pub fn rng_indexed(seed: u64, index: u64) -> Rng {
    Rng::seed_from_u64(indexed_seed(seed, index))
}
