//! Labelled sub-seed derivation.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// Derives a sub-seed from a master seed and a label path.
///
/// `derive(7, &["split"])` and `derive(7, &["split", "a"])` are unrelated;
/// labels are length-prefixed so `["ab"]` and `["a", "b"]` differ too.
pub fn derive(master: u64, labels: &[&str]) -> u64 {
    let mut h = Sha256::new();
    h.update(b"jointsurv-seed");
    h.update(master.to_le_bytes());
    for l in labels {
        h.update((l.len() as u64).to_le_bytes());
        h.update(l.as_bytes());
    }
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("digest has 32 bytes"))
}

pub fn rng(master: u64, labels: &[&str]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(master, labels))
}

/// Hex SHA-256 of a byte slice.
pub fn digest_hex(bytes: &[u8]) -> String {
    hex(&Sha256::digest(bytes))
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    use std::fmt::Write;
    bytes.iter().fold(String::with_capacity(2 * bytes.len()), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}
