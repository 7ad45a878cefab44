//! Plain-text `key = value` configuration files.
//!
//! Blank lines and lines starting with `#` are ignored. Values are taken
//! verbatim after trimming; trailing `# ...` comments are stripped.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use crate::error::ConfigError;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct KeyValues {
    entries: BTreeMap<String, String>,
}

impl KeyValues {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut entries = BTreeMap::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = match raw.find('#') {
                Some(pos) => &raw[..pos],
                None => raw,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                ConfigError::Syntax { line: idx + 1, text: raw.to_string() }
            })?;
            let key = key.trim();
            if key.is_empty() {
                return Err(ConfigError::Syntax { line: idx + 1, text: raw.to_string() });
            }
            entries.insert(key.to_string(), value.trim().to_string());
        }
        Ok(Self { entries })
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError::Io(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn get_str(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    /// Parses `key` if present.
    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>, ConfigError> {
        match self.entries.get(key) {
            None => Ok(None),
            Some(v) => v.parse::<T>().map(Some).map_err(|_| ConfigError::InvalidValue {
                key: key.to_string(),
                value: v.clone(),
            }),
        }
    }

    /// Overwrites `slot` when `key` is present.
    pub fn apply<T: FromStr>(&self, key: &str, slot: &mut T) -> Result<(), ConfigError> {
        if let Some(v) = self.get(key)? {
            *slot = v;
        }
        Ok(())
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    /// Rejects keys outside `known`, which usually indicates a typo.
    pub fn check_known(&self, known: &[&str]) -> Result<(), ConfigError> {
        for key in self.keys() {
            if !known.contains(&key) {
                return Err(ConfigError::UnknownKey(key.to_string()));
            }
        }
        Ok(())
    }
}
