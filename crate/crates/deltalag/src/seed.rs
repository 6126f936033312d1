//! Deterministic derivation of named sub-seeds from one master seed.
//!
//! Every randomized stage (data generation, parameter init, shuffling, ...)
//! seeds its own RNG from `derive_seed(master, "stage-name")` so that adding
//! draws to one stage never perturbs another.

/// Derive a stream seed from a master seed and a stream label.
///
/// FNV-1a over the label, mixed with the master through one splitmix64
/// round. Stable across platforms and releases; checkpoints and panels
/// depend on it.
pub fn derive_seed(master: u64, stream: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in stream.as_bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    let mut z = (master ^ h).wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn streams_are_separated() {
        let a = derive_seed(7, "noise");
        let b = derive_seed(7, "jitter");
        let c = derive_seed(8, "noise");
        assert_ne!(a, b);
        assert_ne!(a, c);
        assert_eq!(a, derive_seed(7, "noise"));
    }

    #[test]
    fn values_are_frozen() {
        // Changing these breaks reproducibility of archived runs; the
        // assertions pin the exact mixing function.
        assert_eq!(derive_seed(0, ""), 14087677454934409008);
        assert_eq!(derive_seed(42, "leader-returns"), 16762069371587551537);
    }
}
