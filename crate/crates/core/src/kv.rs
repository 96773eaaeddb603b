//! `key = value` text used for configs, dataset metadata and checkpoint echoes.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::str::FromStr;

use crate::error::{CatError, Result};

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct KeyValues {
    entries: BTreeMap<String, String>,
}

impl KeyValues {
    pub fn new() -> Self {
        Self::default()
    }

    /// Blank lines and lines starting with `#` are ignored; later keys win.
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) =
                line.split_once('=').ok_or_else(|| CatError::Invalid(format!("line {}: expected `key = value`, got `{line}`", n + 1)))?;
            let key = k.trim();
            if key.is_empty() {
                return Err(CatError::Invalid(format!("line {}: empty key", n + 1)));
            }
            entries.insert(key.to_string(), v.trim().to_string());
        }
        Ok(Self { entries })
    }

    pub fn set(&mut self, key: &str, value: impl Display) {
        self.entries.insert(key.to_string(), value.to_string());
    }

    /// Floats are stored with 17 significant digits so they round-trip.
    pub fn set_f64(&mut self, key: &str, value: f64) {
        self.set(key, format!("{value:.16e}"));
    }

    pub fn set_list<T: Display>(&mut self, key: &str, values: &[T]) {
        let s: Vec<String> = values.iter().map(|v| v.to_string()).collect();
        self.set(key, s.join(" "));
    }

    pub fn get_str(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    pub fn contains(&self, key: &str) -> bool {
        self.entries.contains_key(key)
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>> {
        match self.entries.get(key) {
            None => Ok(None),
            Some(v) => v.parse().map(Some).map_err(|_| CatError::Invalid(format!("cannot parse `{key} = {v}`"))),
        }
    }

    pub fn require<T: FromStr>(&self, key: &str) -> Result<T> {
        self.get(key)?.ok_or_else(|| CatError::Invalid(format!("missing key `{key}`")))
    }

    pub fn get_list<T: FromStr>(&self, key: &str) -> Result<Option<Vec<T>>> {
        match self.entries.get(key) {
            None => Ok(None),
            Some(v) => v
                .split_whitespace()
                .map(|s| s.parse().map_err(|_| CatError::Invalid(format!("cannot parse `{s}` in `{key}`"))))
                .collect::<Result<Vec<T>>>()
                .map(Some),
        }
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.entries {
            out.push_str(k);
            out.push_str(" = ");
            out.push_str(v);
            out.push('\n');
        }
        out
    }
}
