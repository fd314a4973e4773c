//! Flat `key = value` configuration text.
//!
//! One entry per line, `#` starts a comment, later keys override earlier ones.

use std::collections::BTreeMap;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum KvError {
    #[error("line {line}: expected `key = value`, got {text:?}")]
    Malformed { line: usize, text: String },
    #[error("missing key `{0}`")]
    Missing(String),
    #[error("key `{key}`: cannot parse {value:?}")]
    BadValue { key: String, value: String },
}

/// Parses flat key-value text into an ordered map.
pub fn parse(text: &str) -> Result<BTreeMap<String, String>, KvError> {
    let mut out = BTreeMap::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .or_else(|| line.split_once(':'))
            .ok_or_else(|| KvError::Malformed {
                line: idx + 1,
                text: raw.to_string(),
            })?;
        let key = key.trim();
        if key.is_empty() {
            return Err(KvError::Malformed {
                line: idx + 1,
                text: raw.to_string(),
            });
        }
        out.insert(key.to_string(), value.trim().to_string());
    }
    Ok(out)
}

/// Parses a typed value out of a map, if present.
pub fn get<T: std::str::FromStr>(
    map: &BTreeMap<String, String>,
    key: &str,
) -> Result<Option<T>, KvError> {
    match map.get(key) {
        None => Ok(None),
        Some(v) => v.parse().map(Some).map_err(|_| KvError::BadValue {
            key: key.to_string(),
            value: v.clone(),
        }),
    }
}

/// Like [`get`] with a fallback.
pub fn get_or<T: std::str::FromStr>(map: &BTreeMap<String, String>, key: &str, default: T) -> Result<T, KvError> {
    Ok(get(map, key)?.unwrap_or(default))
}

pub fn require<T: std::str::FromStr>(map: &BTreeMap<String, String>, key: &str) -> Result<T, KvError> {
    get(map, key)?.ok_or_else(|| KvError::Missing(key.to_string()))
}

/// Parses a comma-separated list.
pub fn get_list<T: std::str::FromStr>(
    map: &BTreeMap<String, String>,
    key: &str,
) -> Result<Option<Vec<T>>, KvError> {
    match map.get(key) {
        None => Ok(None),
        Some(v) => v
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| {
                s.parse().map_err(|_| KvError::BadValue {
                    key: key.to_string(),
                    value: v.clone(),
                })
            })
            .collect::<Result<Vec<_>, _>>()
            .map(Some),
    }
}
