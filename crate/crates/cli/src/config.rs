//! Flat `key=value` configuration files and `key=value` reports.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use lutmpc_core::{Error, Result};

/// Settings from a config file. Keys use the long flag names, with either
/// `-` or `_` as separator; `#` starts a comment.
#[derive(Clone, Debug, Default)]
pub struct Kv(BTreeMap<String, String>);

impl Kv {
    pub fn parse(text: &str) -> Result<Kv> {
        let mut map = BTreeMap::new();
        for (ln, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::ConfigInvalid(format!("config line {}: expected key=value", ln + 1))
            })?;
            map.insert(normalize(k.trim()), v.trim().to_string());
        }
        Ok(Kv(map))
    }

    pub fn load(path: &Path) -> Result<Kv> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::ConfigInvalid(format!("{}: {e}", path.display())))?;
        Kv::parse(&text)
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.0.get(&normalize(key)).map(String::as_str)
    }

    pub fn set(&mut self, key: &str, value: impl ToString) {
        self.0.insert(normalize(key), value.to_string());
    }

    pub fn remove(&mut self, key: &str) {
        self.0.remove(&normalize(key));
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str)> {
        self.0.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }

    /// Sets `key` when a flag was given, so flags override the file.
    pub fn overlay(&mut self, key: &str, flag: Option<impl ToString>) {
        if let Some(v) = flag {
            self.set(key, v.to_string());
        }
    }

    pub fn value<T: FromStr>(&self, key: &str) -> Result<Option<T>> {
        self.get(key)
            .map(|v| {
                v.parse()
                    .map_err(|_| Error::ConfigInvalid(format!("{key}: cannot parse {v:?}")))
            })
            .transpose()
    }

    pub fn value_or<T: FromStr>(&self, key: &str, default: T) -> Result<T> {
        Ok(self.value(key)?.unwrap_or(default))
    }
}

impl fmt::Display for Kv {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (k, v) in &self.0 {
            writeln!(f, "{k}={v}")?;
        }
        Ok(())
    }
}

fn normalize(k: &str) -> String {
    k.replace('-', "_").to_ascii_lowercase()
}

/// Ordered `key=value` report lines.
#[derive(Default)]
pub struct Report(Vec<(String, String)>);

impl Report {
    pub fn put(&mut self, key: &str, value: impl fmt::Display) {
        self.0.push((key.to_string(), value.to_string()));
    }

    pub fn put_f(&mut self, key: &str, value: f64, digits: usize) {
        self.put(key, format!("{value:.digits$}"));
    }
}

impl fmt::Display for Report {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (k, v) in &self.0 {
            writeln!(f, "{k}={v}")?;
        }
        Ok(())
    }
}
