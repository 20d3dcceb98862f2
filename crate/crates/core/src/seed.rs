//! Named seed derivation.
//!
//! Every random stream in the pipeline is keyed by a run seed plus a purpose
//! tag and optional indices, so independent consumers never share a stream
//! and the whole run is reproducible from one integer.

const GOLDEN: u64 = 0x9e37_79b9_7f4a_7c15;

/// SplitMix64 finalizer.
#[inline]
pub fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derives a child seed from `seed`, a purpose tag and a list of indices.
///
/// The mapping is stable across platforms and compiler versions.
pub fn derive(seed: u64, tag: &str, indices: &[u64]) -> u64 {
    let mut h = mix64(seed ^ GOLDEN);
    for b in tag.bytes() {
        h = mix64(h ^ u64::from(b)).wrapping_add(GOLDEN);
    }
    // separator so ("ab", []) and ("a", [b]) differ
    h = mix64(h ^ 0xff);
    for &i in indices {
        h = mix64(h.wrapping_add(GOLDEN) ^ i);
    }
    h
}
