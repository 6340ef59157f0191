//! Deterministic seed derivation. Every random stream in the crate is a
//! `ChaCha8Rng` keyed from a root seed plus a label, so sub-streams are
//! independent of evaluation order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derives a child seed from `root` and a byte key (FNV-1a, then splitmix).
pub fn derive(root: u64, key: &[u8]) -> u64 {
    let mut h = FNV_OFFSET ^ splitmix64(root);
    for &b in key {
        h ^= u64::from(b);
        h = h.wrapping_mul(FNV_PRIME);
    }
    splitmix64(h)
}

pub fn derive_str(root: u64, key: &str) -> u64 {
    derive(root, key.as_bytes())
}

pub fn derive_index(root: u64, label: &str, index: u64) -> u64 {
    let mut key = label.as_bytes().to_vec();
    key.extend_from_slice(&index.to_le_bytes());
    derive(root, &key)
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
