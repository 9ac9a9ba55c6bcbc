//! Versioned JSON documents whose floats are stored as the hex image of
//! their IEEE-754 bits, so a save/load cycle is bit-exact.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Map, Number, Value};

use crate::error::{Error, Result};

const HEX_PREFIX: &str = "0x";

fn encode(v: Value) -> Value {
    match v {
        Value::Number(n) if n.is_f64() => {
            let bits = n.as_f64().expect("f64 number").to_bits();
            Value::String(format!("{HEX_PREFIX}{bits:016x}"))
        }
        Value::Array(a) => Value::Array(a.into_iter().map(encode).collect()),
        Value::Object(m) => Value::Object(m.into_iter().map(|(k, v)| (k, encode(v))).collect()),
        other => other,
    }
}

fn decode(v: Value) -> Result<Value> {
    Ok(match v {
        Value::String(s) if s.len() == 18 && s.starts_with(HEX_PREFIX) => {
            match u64::from_str_radix(&s[2..], 16) {
                Ok(bits) => {
                    let x = f64::from_bits(bits);
                    Value::Number(Number::from_f64(x).ok_or_else(|| Error::Corrupt {
                        path: String::new(),
                        reason: format!("non-finite float {s}"),
                    })?)
                }
                Err(_) => Value::String(s),
            }
        }
        Value::Array(a) => Value::Array(a.into_iter().map(decode).collect::<Result<_>>()?),
        Value::Object(m) => Value::Object(
            m.into_iter()
                .map(|(k, v)| decode(v).map(|v| (k, v)))
                .collect::<Result<Map<_, _>>>()?,
        ),
        other => other,
    })
}

/// Serializes `body` under `{"format_version": version, "kind": kind, "body": ...}`.
pub fn to_document<T: Serialize>(kind: &str, version: u32, body: &T) -> Result<String> {
    let mut m = Map::new();
    m.insert("format_version".into(), Value::from(version));
    m.insert("kind".into(), Value::from(kind));
    m.insert("body".into(), encode(serde_json::to_value(body)?));
    let mut s = serde_json::to_string_pretty(&Value::Object(m))?;
    s.push('\n');
    Ok(s)
}

pub fn from_document<T: DeserializeOwned>(kind: &str, version: u32, text: &str, path: &str) -> Result<T> {
    let corrupt = |reason: String| Error::Corrupt {
        path: path.to_string(),
        reason,
    };
    let root: Value = serde_json::from_str(text).map_err(|e| corrupt(e.to_string()))?;
    let found = root.get("format_version").ok_or_else(|| corrupt("missing format_version".into()))?;
    if found.as_u64() != Some(version as u64) {
        return Err(Error::VersionMismatch {
            expected: version,
            found: found.to_string(),
        });
    }
    if root.get("kind").and_then(Value::as_str) != Some(kind) {
        return Err(corrupt(format!("not a {kind} document")));
    }
    let body = root.get("body").cloned().ok_or_else(|| corrupt("missing body".into()))?;
    let body = decode(body).map_err(|e| match e {
        Error::Corrupt { reason, .. } => corrupt(reason),
        other => other,
    })?;
    serde_json::from_value(body).map_err(|e| corrupt(e.to_string()))
}

pub fn save_document<T: Serialize>(path: &Path, kind: &str, version: u32, body: &T) -> Result<()> {
    std::fs::write(path, to_document(kind, version, body)?)?;
    Ok(())
}

pub fn load_document<T: DeserializeOwned>(path: &Path, kind: &str, version: u32) -> Result<T> {
    let text = std::fs::read_to_string(path)?;
    from_document(kind, version, &text, &path.display().to_string())
}
