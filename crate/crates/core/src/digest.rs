//! SHA-256 helpers shared by id derivation, checksums and seeded orderings.

use alloc::string::String;
use core::fmt::Write;

use sha2::{Digest, Sha256};

/// Lowercase hex SHA-256 of `bytes`.
pub fn sha256_hex(bytes: &[u8]) -> String {
    to_hex(&Sha256::digest(bytes))
}

/// Incremental SHA-256 that renders as lowercase hex.
#[derive(Clone, Default)]
pub struct Checksum(Sha256);

impl Checksum {
    pub fn new() -> Self {
        Self(Sha256::new())
    }

    pub fn update(&mut self, bytes: &[u8]) {
        self.0.update(bytes);
    }

    pub fn finish_hex(self) -> String {
        to_hex(&self.0.finalize())
    }
}

/// Sort key of `id` under `seed`.
///
/// Ordering a set of ids by this key is a seeded permutation that depends only
/// on the ids themselves, never on the order they were read in.
pub fn seeded_key(seed: u64, id: &str) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update((id.len() as u64).to_le_bytes());
    hasher.update(id.as_bytes());
    let out = hasher.finalize();
    let mut head = [0u8; 8];
    head.copy_from_slice(&out[..8]);
    u64::from_be_bytes(head)
}

fn to_hex(bytes: &[u8]) -> String {
    let mut s = String::with_capacity(bytes.len() * 2);
    for b in bytes {
        let _ = write!(s, "{b:02x}");
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn known_vector() {
        assert_eq!(
            sha256_hex(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
        let mut c = Checksum::new();
        c.update(b"a");
        c.update(b"bc");
        assert_eq!(c.finish_hex(), sha256_hex(b"abc"));
    }

    #[test]
    fn seeded_key_depends_on_seed() {
        assert_eq!(seeded_key(7, "doc-1"), seeded_key(7, "doc-1"));
        assert_ne!(seeded_key(7, "doc-1"), seeded_key(8, "doc-1"));
    }
}
