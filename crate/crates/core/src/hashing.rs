use sha2::{Digest, Sha256};

/// Byte separator used when hashing several logical fields into one id.
pub const FIELD_SEP: u8 = 0x1f;

pub fn hex_lower(bytes: &[u8]) -> String {
    use std::fmt::Write;
    let mut out = String::with_capacity(bytes.len() * 2);
    for b in bytes {
        write!(out, "{b:02x}").expect("writing to a String cannot fail");
    }
    out
}

pub fn sha256_fields(fields: &[&[u8]]) -> [u8; 32] {
    let mut hasher = Sha256::new();
    for (i, field) in fields.iter().enumerate() {
        if i > 0 {
            hasher.update([FIELD_SEP]);
        }
        hasher.update(field);
    }
    hasher.finalize().into()
}

/// Content-derived sample id: first 32 hex chars of the SHA-256 over
/// (dataset id, text). Identical text in the same dataset collapses to the
/// same id, which is what exact-duplicate detection keys on.
pub fn sample_id(dataset_id: &str, text: &str) -> String {
    let digest = sha256_fields(&[dataset_id.as_bytes(), text.as_bytes()]);
    hex_lower(&digest[..16])
}

/// Deterministic 64-bit seed derived from string fields, for namespacing one
/// user-facing seed into independent per-stage streams.
pub fn stable_seed(fields: &[&str]) -> u64 {
    let parts: Vec<&[u8]> = fields.iter().map(|f| f.as_bytes()).collect();
    let digest = sha256_fields(&parts);
    u64::from_le_bytes(digest[..8].try_into().expect("32-byte digest"))
}

/// Mixes a base seed with a stage tag, e.g. `mix_seed(seed, &["split"])`.
pub fn mix_seed(base: u64, tags: &[&str]) -> u64 {
    let base_hex = format!("{base:016x}");
    let mut fields: Vec<&str> = vec![&base_hex];
    fields.extend_from_slice(tags);
    stable_seed(&fields)
}
