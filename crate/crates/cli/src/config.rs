//! `key = value` configuration files. Command-line flags take precedence.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use anyhow::{anyhow, bail, Context, Result};

#[derive(Debug, Default, Clone)]
pub struct ConfigFile {
    values: BTreeMap<String, (usize, String)>,
}

impl ConfigFile {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("in config {}", path.display()))
    }

    /// Blank lines and `#` comments are skipped; keys may use `-` or `_`.
    pub fn parse(text: &str) -> Result<Self> {
        let mut values = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| anyhow!("line {}: expected `key = value`", i + 1))?;
            let key = key.trim().replace('_', "-");
            if key.is_empty() {
                bail!("line {}: empty key", i + 1);
            }
            if values.insert(key.clone(), (i + 1, value.trim().to_string())).is_some() {
                bail!("line {}: duplicate key `{key}`", i + 1);
            }
        }
        Ok(ConfigFile { values })
    }

    /// Rejects keys outside `known`.
    pub fn check_keys(&self, known: &[&str]) -> Result<()> {
        for (key, (line, _)) in &self.values {
            if !known.contains(&key.as_str()) {
                bail!("line {line}: unknown key `{key}` (accepted: {})", known.join(", "));
            }
        }
        Ok(())
    }

    pub fn get<T>(&self, key: &str) -> Result<Option<T>>
    where
        T: FromStr,
        T::Err: std::fmt::Display,
    {
        match self.values.get(key) {
            None => Ok(None),
            Some((line, v)) => v
                .parse()
                .map(Some)
                .map_err(|e| anyhow!("config line {line}: bad value for `{key}`: {e}")),
        }
    }

    /// Flag if given, else config value, else `default`.
    pub fn pick<T>(&self, flag: Option<T>, key: &str, default: T) -> Result<T>
    where
        T: FromStr,
        T::Err: std::fmt::Display,
    {
        match flag {
            Some(v) => Ok(v),
            None => Ok(self.get(key)?.unwrap_or(default)),
        }
    }

    pub fn pick_opt<T>(&self, flag: Option<T>, key: &str) -> Result<Option<T>>
    where
        T: FromStr,
        T::Err: std::fmt::Display,
    {
        match flag {
            Some(v) => Ok(Some(v)),
            None => self.get(key),
        }
    }
}
