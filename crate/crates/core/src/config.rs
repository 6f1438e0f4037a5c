//! Config canonicalisation, digests and seed fan-out.

use std::path::Path;

use serde::Serialize;
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Serializes `value` as JSON with object keys sorted at every level.
pub fn canonical_json<T: Serialize>(value: &T) -> Result<String> {
    let v = serde_json::to_value(value)?;
    Ok(serde_json::to_string(&sort_keys(v))?)
}

fn sort_keys(v: Value) -> Value {
    match v {
        Value::Object(map) => {
            let mut entries: Vec<(String, Value)> = map.into_iter().collect();
            entries.sort_by(|a, b| a.0.cmp(&b.0));
            Value::Object(entries.into_iter().map(|(k, v)| (k, sort_keys(v))).collect())
        }
        Value::Array(items) => Value::Array(items.into_iter().map(sort_keys).collect()),
        other => other,
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// SHA-256 of the canonical JSON form, hex encoded.
pub fn config_digest<T: Serialize>(value: &T) -> Result<String> {
    let text = canonical_json(value)?;
    Ok(hex(&Sha256::digest(text.as_bytes())))
}

/// Per-component seed: the first eight bytes of
/// `SHA-256(le_bytes(seed) || component)` read as a little-endian `u64`.
pub fn derive_seed(seed: u64, component: &str) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update(component.as_bytes());
    let digest = hasher.finalize();
    let mut first = [0u8; 8];
    first.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(first)
}

/// Writes `config.json` (canonical form) and `config.digest` into `dir`.
pub fn write_config_copy<T: Serialize>(dir: &Path, value: &T) -> Result<String> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let text = canonical_json(value)?;
    let digest = hex(&Sha256::digest(text.as_bytes()));
    let cfg_path = dir.join("config.json");
    std::fs::write(&cfg_path, &text).map_err(|e| Error::io(&cfg_path, e))?;
    let digest_path = dir.join("config.digest");
    std::fs::write(&digest_path, format!("{digest}\n")).map_err(|e| Error::io(&digest_path, e))?;
    Ok(digest)
}
