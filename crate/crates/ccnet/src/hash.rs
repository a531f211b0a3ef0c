//! FNV-1a 64 content hashing, used for checkpoint payload audits, artifact
//! hashes in run manifests, and seed derivation.

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

pub fn hex64(v: u64) -> String {
    format!("{v:016x}")
}
