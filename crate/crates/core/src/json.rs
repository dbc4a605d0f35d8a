//! Byte-stable JSON output and config hashing.
//!
//! `serde_json::Value` keeps object keys in a `BTreeMap`, so routing every
//! document through it yields sorted keys regardless of struct field order.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::Result;

pub fn to_sorted_pretty<T: Serialize>(value: &T) -> Result<String> {
    let v = serde_json::to_value(value)?;
    let mut s = serde_json::to_string_pretty(&v)?;
    s.push('\n');
    Ok(s)
}

/// Sorted-key, whitespace-free serialization.
pub fn canonical<T: Serialize>(value: &T) -> Result<String> {
    let v = serde_json::to_value(value)?;
    Ok(serde_json::to_string(&v)?)
}

pub fn write_sorted<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, to_sorted_pretty(value)?)?;
    Ok(())
}

pub fn read<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path)?;
    Ok(serde_json::from_str(&text)?)
}

/// Lowercase hex SHA-256 of the canonical JSON form.
pub fn config_hash<T: Serialize>(value: &T) -> Result<String> {
    let digest = Sha256::digest(canonical(value)?.as_bytes());
    Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
}
