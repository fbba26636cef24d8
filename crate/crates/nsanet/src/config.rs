//! Line-oriented `key = value` configuration files, shared by checkpoint
//! sidecars and the command-line pipeline, plus the config digest used in
//! run manifests.
//!
//! Format: one `key = value` pair per line; blank lines and lines starting
//! with `#` are ignored; keys are unique (later duplicates are an error so
//! silent overrides can't hide typos).

use crate::error::{Error, Result};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::path::Path;

pub fn parse_kv(text: &str, origin: &Path) -> Result<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    for (idx, line) in text.lines().enumerate() {
        let lineno = idx + 1;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let (key, value) = trimmed.split_once('=').ok_or_else(|| Error::Parse {
            path: origin.to_path_buf(),
            line: lineno,
            message: format!("expected `key = value`, got {:?}", trimmed),
        })?;
        let key = key.trim().to_string();
        let value = value.trim().to_string();
        if key.is_empty() {
            return Err(Error::Parse {
                path: origin.to_path_buf(),
                line: lineno,
                message: "empty key".into(),
            });
        }
        if map.insert(key.clone(), value).is_some() {
            return Err(Error::Parse {
                path: origin.to_path_buf(),
                line: lineno,
                message: format!("duplicate key {:?}", key),
            });
        }
    }
    Ok(map)
}

pub fn read_kv_file(path: &Path) -> Result<BTreeMap<String, String>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_kv(&text, path)
}

/// Serialize pairs in the given order, one `key = value` per line.
pub fn format_kv<'a>(pairs: impl IntoIterator<Item = (&'a str, &'a str)>) -> String {
    let mut out = String::new();
    for (k, v) in pairs {
        out.push_str(k);
        out.push_str(" = ");
        out.push_str(v);
        out.push('\n');
    }
    out
}

pub fn write_kv_file<'a>(
    path: &Path,
    pairs: impl IntoIterator<Item = (&'a str, &'a str)>,
) -> Result<()> {
    std::fs::write(path, format_kv(pairs)).map_err(|e| Error::io(path, e))
}

/// SHA-256 of arbitrary bytes as lowercase hex; stable across platforms, so
/// two runs over identical config bytes always report the same digest.
pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    let out = h.finalize();
    let mut s = String::with_capacity(64);
    for b in out {
        s.push_str(&format!("{:02x}", b));
    }
    s
}

/// Typed getters over a parsed map, tracking the origin for errors.
pub struct KvView<'a> {
    map: &'a BTreeMap<String, String>,
    origin: String,
}

impl<'a> KvView<'a> {
    pub fn new(map: &'a BTreeMap<String, String>, origin: impl Into<String>) -> Self {
        KvView {
            map,
            origin: origin.into(),
        }
    }

    pub fn get(&self, key: &str) -> Option<&'a str> {
        self.map.get(key).map(|s| s.as_str())
    }

    pub fn require(&self, key: &str) -> Result<&'a str> {
        self.get(key).ok_or_else(|| {
            Error::validation(format!("{}: missing required key {:?}", self.origin, key))
        })
    }

    pub fn parse<T: std::str::FromStr>(&self, key: &str) -> Result<Option<T>> {
        match self.get(key) {
            None => Ok(None),
            Some(raw) => raw.parse::<T>().map(Some).map_err(|_| {
                Error::validation(format!(
                    "{}: key {:?} has unparsable value {:?}",
                    self.origin, key, raw
                ))
            }),
        }
    }

    pub fn parse_or<T: std::str::FromStr>(&self, key: &str, default: T) -> Result<T> {
        Ok(self.parse(key)?.unwrap_or(default))
    }

    pub fn require_parse<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        self.require(key)?;
        Ok(self.parse(key)?.expect("require checked presence"))
    }
}
