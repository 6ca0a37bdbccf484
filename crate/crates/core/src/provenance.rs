//! Content hashes used to tie on-disk artifacts to the inputs that produced them.

use sha2::{Digest, Sha256};

pub fn hash_bytes(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Hash of several labelled parts; the labels keep `("a", "bc")` and `("ab", "c")` distinct.
pub fn hash_parts<'a>(parts: impl IntoIterator<Item = (&'a str, &'a [u8])>) -> String {
    let mut h = Sha256::new();
    for (label, bytes) in parts {
        h.update((label.len() as u64).to_le_bytes());
        h.update(label.as_bytes());
        h.update((bytes.len() as u64).to_le_bytes());
        h.update(bytes);
    }
    hex::encode(h.finalize())
}

/// Hash of a float matrix by bit pattern, row-major.
pub fn hash_f64s<'a>(values: impl IntoIterator<Item = &'a f64>) -> String {
    let mut h = Sha256::new();
    for v in values {
        h.update(v.to_bits().to_le_bytes());
    }
    hex::encode(h.finalize())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn labels_disambiguate() {
        let a = hash_parts([("a", b"bc".as_slice())]);
        let b = hash_parts([("ab", b"c".as_slice())]);
        assert_ne!(a, b);
        assert_eq!(a, hash_parts([("a", b"bc".as_slice())]));
    }
}
