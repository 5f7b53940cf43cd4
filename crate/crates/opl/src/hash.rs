use sha2::{Digest, Sha256};

/// Hex SHA-256 over length-prefixed parts, so part boundaries matter.
pub fn content_hash<'a>(parts: impl IntoIterator<Item = &'a [u8]>) -> String {
    let mut h = Sha256::new();
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p);
    }
    hex::encode(h.finalize())
}

/// First eight bytes of `SHA-256(text)`, little-endian.
pub fn seed_from(text: &str) -> u64 {
    let d = Sha256::digest(text.as_bytes());
    u64::from_le_bytes(d[..8].try_into().unwrap())
}
