//! Seed derivation.
//!
//! Every randomized component draws its RNG seed from one master seed plus a
//! domain string, so adding or reordering components never shifts the streams
//! of existing ones. The scheme is FNV-1a over the domain bytes followed by a
//! splitmix64 finalizer, and is part of the reproducibility contract: the
//! same (master, domain) pair yields the same seed in every version.

/// Derive a component seed from a master seed and a domain label.
pub fn derive_seed(master: u64, domain: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in domain.as_bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    splitmix64(master ^ h)
}

/// splitmix64 finalizer; also usable to spread consecutive indices.
pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn derivation_is_stable_and_domain_separated() {
        let a = derive_seed(42, "bench");
        let b = derive_seed(42, "bench");
        let c = derive_seed(42, "mmd");
        let d = derive_seed(43, "bench");
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_ne!(a, d);
    }
}
