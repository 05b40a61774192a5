//! Canonical JSON encoding and content digests.
//!
//! Object keys are emitted in lexicographic byte order, no insignificant
//! whitespace is written, and the result is hashed with SHA-256. The same
//! bytes are produced on every platform and process.

use serde::Serialize;
use serde_json::Value as Json;
use sha2::{Digest, Sha256};

#[derive(Debug, thiserror::Error)]
pub enum CanonicalError {
    #[error("value is not serializable: {0}")]
    Serialize(#[from] serde_json::Error),
    #[error("non-finite number at {0}")]
    NonFinite(String),
}

/// Encodes `value` as canonical JSON bytes.
pub fn to_canonical_bytes<T: Serialize + ?Sized>(value: &T) -> Result<Vec<u8>, CanonicalError> {
    let json = serde_json::to_value(value)?;
    let mut out = Vec::with_capacity(256);
    write_canonical(&json, "$", &mut out)?;
    Ok(out)
}

pub fn to_canonical_string<T: Serialize + ?Sized>(value: &T) -> Result<String, CanonicalError> {
    let bytes = to_canonical_bytes(value)?;
    Ok(String::from_utf8(bytes).expect("serde_json emits UTF-8"))
}

fn write_canonical(json: &Json, path: &str, out: &mut Vec<u8>) -> Result<(), CanonicalError> {
    match json {
        Json::Object(map) => {
            let mut keys: Vec<&String> = map.keys().collect();
            keys.sort();
            out.push(b'{');
            for (i, key) in keys.iter().enumerate() {
                if i > 0 {
                    out.push(b',');
                }
                out.extend(serde_json::to_vec(key)?);
                out.push(b':');
                write_canonical(&map[*key], &format!("{path}.{key}"), out)?;
            }
            out.push(b'}');
        }
        Json::Array(items) => {
            out.push(b'[');
            for (i, item) in items.iter().enumerate() {
                if i > 0 {
                    out.push(b',');
                }
                write_canonical(item, &format!("{path}[{i}]"), out)?;
            }
            out.push(b']');
        }
        Json::Number(n) => {
            if n.as_f64().is_some_and(|f| !f.is_finite()) {
                return Err(CanonicalError::NonFinite(path.to_string()));
            }
            out.extend(n.to_string().as_bytes());
        }
        other => out.extend(serde_json::to_vec(other)?),
    }
    Ok(())
}

/// Lowercase hex SHA-256 of `bytes`.
pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// SHA-256 over the canonical encoding of `value`.
pub fn digest_of<T: Serialize + ?Sized>(value: &T) -> Result<String, CanonicalError> {
    Ok(sha256_hex(&to_canonical_bytes(value)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn keys_are_sorted_at_every_level() {
        let v = json!({"b": 1, "a": {"z": true, "m": [ {"y": 1, "x": 2} ]}});
        let s = to_canonical_string(&v).unwrap();
        assert_eq!(s, r#"{"a":{"m":[{"x":2,"y":1}],"z":true},"b":1}"#);
    }

    #[test]
    fn digest_is_stable() {
        let v = json!({"k": "v"});
        assert_eq!(digest_of(&v).unwrap(), digest_of(&v).unwrap());
        assert_eq!(digest_of(&v).unwrap().len(), 64);
        assert_eq!(
            sha256_hex(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }
}
