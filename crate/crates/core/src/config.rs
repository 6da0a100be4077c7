//! Plain-text `key = value` configuration files.
//!
//! Blank lines and lines starting with `#` are ignored. Later assignments
//! override earlier ones, and [`KeyValues::set`] lets callers layer
//! command-line overrides on top of a file.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use crate::error::{io_err, Error, Result};

#[derive(Clone, Debug, Default, PartialEq)]
pub struct KeyValues {
    map: BTreeMap<String, String>,
}

impl KeyValues {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut kv = KeyValues::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", lineno + 1)))?;
            let k = k.trim();
            if k.is_empty() {
                return Err(Error::Config(format!("line {}: empty key", lineno + 1)));
            }
            kv.set(k, v.trim());
        }
        Ok(kv)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        Self::parse(&text)
    }

    pub fn set(&mut self, key: &str, value: impl Display) {
        self.map.insert(key.to_string(), value.to_string());
    }

    pub fn get_str(&self, key: &str) -> Option<&str> {
        self.map.get(key).map(String::as_str)
    }

    /// Parses `key` if present, otherwise returns `default`.
    pub fn get_or<T>(&self, key: &str, default: T) -> Result<T>
    where
        T: FromStr,
        T::Err: Display,
    {
        match self.map.get(key) {
            None => Ok(default),
            Some(v) => v
                .parse()
                .map_err(|e| Error::Config(format!("{key} = {v}: {e}"))),
        }
    }

    /// Comma-separated list, or `default` when absent.
    pub fn get_list_or<T>(&self, key: &str, default: Vec<T>) -> Result<Vec<T>>
    where
        T: FromStr,
        T::Err: Display,
    {
        match self.map.get(key) {
            None => Ok(default),
            Some(v) => v
                .split(',')
                .map(str::trim)
                .filter(|s| !s.is_empty())
                .map(|s| s.parse().map_err(|e| Error::Config(format!("{key} = {v}: {e}"))))
                .collect(),
        }
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.map.keys().map(String::as_str)
    }

    /// Merges `other` on top of `self`.
    pub fn extend(&mut self, other: &KeyValues) {
        for (k, v) in &other.map {
            self.map.insert(k.clone(), v.clone());
        }
    }

    /// Rejects keys not listed in `known`.
    pub fn check_known(&self, known: &[&str]) -> Result<()> {
        match self.map.keys().find(|k| !known.contains(&k.as_str())) {
            Some(k) => Err(Error::Config(format!("unknown key `{k}`"))),
            None => Ok(()),
        }
    }

    /// Canonical text form: sorted `key = value` lines.
    pub fn to_text(&self) -> String {
        self.map.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}

pub(crate) fn join<T: Display>(items: &[T]) -> String {
    items.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_and_overrides() {
        let kv = KeyValues::parse("# toy\nlr = 0.5\n\nepochs=3\nlr = 0.25\n").unwrap();
        assert_eq!(kv.get_or("lr", 0.0).unwrap(), 0.25);
        assert_eq!(kv.get_or("epochs", 0usize).unwrap(), 3);
        assert_eq!(kv.get_or("missing", 7usize).unwrap(), 7);
    }

    #[test]
    fn rejects_malformed_lines_and_values() {
        assert!(KeyValues::parse("novalue\n").is_err());
        assert!(KeyValues::parse(" = 3\n").is_err());
        let kv = KeyValues::parse("epochs = three").unwrap();
        assert!(kv.get_or("epochs", 1usize).is_err());
    }

    #[test]
    fn lists_and_canonical_text() {
        let kv = KeyValues::parse("k = 1, 2,3\nb = x").unwrap();
        assert_eq!(kv.get_list_or("k", vec![0usize]).unwrap(), vec![1, 2, 3]);
        assert_eq!(kv.to_text(), "b = x\nk = 1, 2,3\n");
        assert_eq!(KeyValues::parse(&kv.to_text()).unwrap(), kv);
    }
}
