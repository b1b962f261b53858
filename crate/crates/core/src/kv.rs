//! `key = value` text used by configs, manifests and reports.
//!
//! Blank lines and lines starting with `#` are skipped. Keys are unique.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Clone, Debug, Default)]
pub struct KvMap {
    entries: BTreeMap<String, (usize, String)>,
    taken: std::collections::BTreeSet<String>,
}

impl KvMap {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(Error::Config(format!(
                    "line {}: expected `key = value`, got {line:?}",
                    n + 1
                )));
            };
            let key = k.trim().to_string();
            if key.is_empty() {
                return Err(Error::Config(format!("line {}: empty key", n + 1)));
            }
            if entries.insert(key.clone(), (n + 1, v.trim().to_string())).is_some() {
                return Err(Error::Config(format!("line {}: duplicate key {key:?}", n + 1)));
            }
        }
        Ok(KvMap {
            entries,
            taken: Default::default(),
        })
    }

    pub fn contains(&self, key: &str) -> bool {
        self.entries.contains_key(key)
    }

    /// Raw value, marking the key as consumed.
    pub fn raw(&mut self, key: &str) -> Option<String> {
        let v = self.entries.get(key).map(|(_, v)| v.clone());
        if v.is_some() {
            self.taken.insert(key.to_string());
        }
        v
    }

    pub fn get<T: FromStr>(&mut self, key: &str) -> Result<Option<T>>
    where
        T::Err: Display,
    {
        match self.raw(key) {
            None => Ok(None),
            Some(v) => v
                .parse()
                .map(Some)
                .map_err(|e| Error::Config(format!("key {key:?}: cannot parse {v:?}: {e}"))),
        }
    }

    pub fn get_or<T: FromStr>(&mut self, key: &str, default: T) -> Result<T>
    where
        T::Err: Display,
    {
        Ok(self.get(key)?.unwrap_or(default))
    }

    pub fn require<T: FromStr>(&mut self, key: &str) -> Result<T>
    where
        T::Err: Display,
    {
        self.get(key)?
            .ok_or_else(|| Error::Config(format!("missing required key {key:?}")))
    }

    /// Comma-separated list.
    pub fn list<T: FromStr>(&mut self, key: &str) -> Result<Option<Vec<T>>>
    where
        T::Err: Display,
    {
        let Some(v) = self.raw(key) else { return Ok(None) };
        v.split(',')
            .map(|p| {
                let p = p.trim();
                p.parse()
                    .map_err(|e| Error::Config(format!("key {key:?}: cannot parse element {p:?}: {e}")))
            })
            .collect::<Result<Vec<T>>>()
            .map(Some)
    }

    /// Error on any key that was never read.
    pub fn finish(&self) -> Result<()> {
        let unknown: Vec<String> = self
            .entries
            .iter()
            .filter(|(k, _)| !self.taken.contains(*k))
            .map(|(k, (line, _))| format!("{k:?} (line {line})"))
            .collect();
        if unknown.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(format!("unknown key(s): {}", unknown.join(", "))))
        }
    }
}

pub fn join<T: Display>(items: &[T]) -> String {
    items.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
}
