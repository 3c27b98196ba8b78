//! Flat `key=value` text maps, used for run configs and checkpoint sections.
//!
//! One entry per line; blank lines and lines starting with `#` are ignored.
//! Keys are kept sorted so serialized output is byte-stable.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::str::FromStr;

use crate::{Error, Result};

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct KvMap {
    entries: BTreeMap<String, String>,
}

impl KvMap {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut map = Self::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::invalid(format!("line {}: expected key=value, got '{line}'", n + 1)))?;
            let key = k.trim();
            if key.is_empty() {
                return Err(Error::invalid(format!("line {}: empty key", n + 1)));
            }
            if map.entries.insert(key.to_string(), v.trim().to_string()).is_some() {
                return Err(Error::invalid(format!("line {}: duplicate key '{key}'", n + 1)));
            }
        }
        Ok(map)
    }

    /// Parses one `key=value` override.
    pub fn apply_override(&mut self, item: &str) -> Result<()> {
        let (k, v) = item
            .split_once('=')
            .ok_or_else(|| Error::invalid(format!("override '{item}' must be key=value")))?;
        self.entries.insert(k.trim().to_string(), v.trim().to_string());
        Ok(())
    }

    pub fn to_text(&self) -> String {
        self.entries
            .iter()
            .map(|(k, v)| format!("{k}={v}\n"))
            .collect()
    }

    pub fn set(&mut self, key: &str, value: impl Display) {
        self.entries.insert(key.to_string(), value.to_string());
    }

    /// Floats use Rust's shortest round-trip formatting, so parsing restores them exactly.
    pub fn set_f64(&mut self, key: &str, value: f64) {
        self.set(key, value);
    }

    pub fn contains(&self, key: &str) -> bool {
        self.entries.contains_key(key)
    }

    pub fn remove(&mut self, key: &str) -> Option<String> {
        self.entries.remove(key)
    }

    pub fn get_str(&self, key: &str) -> Result<&str> {
        self.entries
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::invalid(format!("missing key '{key}'")))
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<T> {
        let raw = self.get_str(key)?;
        raw.parse()
            .map_err(|_| Error::invalid(format!("cannot parse value '{raw}' for key '{key}'")))
    }

    pub fn get_or<T: FromStr>(&self, key: &str, default: T) -> Result<T> {
        if self.contains(key) {
            self.get(key)
        } else {
            Ok(default)
        }
    }

    /// Comma-separated list.
    pub fn get_list<T: FromStr>(&self, key: &str) -> Result<Vec<T>> {
        let raw = self.get_str(key)?;
        if raw.is_empty() {
            return Ok(Vec::new());
        }
        raw.split(',')
            .map(|p| {
                p.trim()
                    .parse()
                    .map_err(|_| Error::invalid(format!("bad list item '{p}' for key '{key}'")))
            })
            .collect()
    }

    /// Rejects any key not in `known`.
    pub fn reject_unknown(&self, known: &[&str]) -> Result<()> {
        let unknown: Vec<&str> = self
            .entries
            .keys()
            .map(String::as_str)
            .filter(|k| !known.contains(k))
            .collect();
        if unknown.is_empty() {
            Ok(())
        } else {
            Err(Error::invalid(format!("unknown config keys: {}", unknown.join(", "))))
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }
}
