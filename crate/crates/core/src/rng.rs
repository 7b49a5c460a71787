//! Seed derivation. Every random quantity in the simulator is drawn from a
//! ChaCha8 stream whose seed is derived from (master seed, domain tag,
//! indices), so parallel and serial generation are bit-identical and any
//! prefix of a run can be reproduced exactly.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Domain tags keep independent consumers of the same master seed apart.
pub mod tag {
    pub const DICT: u64 = 0x6469_6374;
    pub const INIT: u64 = 0x696e_6974;
    pub const DATA: u64 = 0x6461_7461;
    pub const SAMPLE: u64 = 0x736d_706c;
    pub const PATCH: u64 = 0x7074_6368;
    pub const SHUFFLE: u64 = 0x7368_7566;
    pub const DIAG: u64 = 0x6469_6167;
    pub const AUDIT: u64 = 0x6175_6474;
    pub const GRADCHECK: u64 = 0x6763_686b;
    pub const LEMMA: u64 = 0x6c65_6d61;
    pub const KMEANS: u64 = 0x6b6d_6e73;
}

/// SplitMix64 finalizer; good avalanche, cheap.
#[inline]
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derives a child seed from a master seed, a domain tag and two indices.
pub fn derive_seed(master: u64, tag: u64, a: u64, b: u64) -> u64 {
    let mut s = mix64(master ^ tag.wrapping_mul(0xa24b_aed4_963e_e407));
    s = mix64(s ^ a.wrapping_mul(0x9fb2_1c65_1e98_df25));
    mix64(s ^ b.wrapping_mul(0xc2b2_ae3d_27d4_eb4f))
}

/// A ChaCha8 stream for the derived seed.
pub fn stream(master: u64, tag: u64, a: u64, b: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(master, tag, a, b))
}
