//! Deterministic seed fan-out.
//!
//! Every randomized stage derives its own seed from the single master seed
//! and a stable string label (`"split"`, `"train:lstm:sequence"`,
//! `"subject:3"`, ...). The derivation is a fixed hash construction, so the
//! stream a stage sees depends only on (master seed, label) and never on
//! scheduling, thread count, or the order stages happen to run in.
//!
//! Construction: the label is hashed with FNV-1a (64 bit), xored into a
//! SplitMix64-scrambled master seed, and scrambled once more. SplitMix64 is
//! the standard 64-bit finalizer from Steele et al.'s SplittableRandom and
//! gives good avalanche behavior for sequential or related inputs.

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h = FNV_OFFSET;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(FNV_PRIME);
    }
    h
}

fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derive a stage seed from the master seed and a stable label.
pub fn derive_seed(master: u64, label: &str) -> u64 {
    splitmix64(splitmix64(master) ^ fnv1a64(label.as_bytes()))
}

/// FNV-1a digest of an arbitrary byte string, used for config/dataset
/// fingerprints in cache keys and report provenance.
pub fn digest_bytes(bytes: &[u8]) -> u64 {
    fnv1a64(bytes)
}
