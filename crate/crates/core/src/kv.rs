//! Flat `key=value` text blocks.
//!
//! Used for the edit configuration file, the schedule block embedded in
//! trajectory-cache headers, and mixture parameter files. Keys carry a
//! section prefix (`schedule.`, `guidance.`, ...). Blank lines and lines
//! starting with `#` are ignored.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Debug, Clone)]
struct Entry {
    value: String,
    line: usize,
}

/// Parsed key/value pairs with their source line numbers.
#[derive(Debug, Clone, Default)]
pub struct KvMap {
    source: String,
    entries: BTreeMap<String, Entry>,
}

impl KvMap {
    pub fn new(source: impl Into<String>) -> Self {
        Self {
            source: source.into(),
            entries: BTreeMap::new(),
        }
    }

    pub fn parse(text: &str, source: impl Into<String>) -> Result<Self> {
        let mut map = Self::new(source);
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let trimmed = raw.trim();
            if trimmed.is_empty() || trimmed.starts_with('#') {
                continue;
            }
            let Some((key, value)) = trimmed.split_once('=') else {
                return Err(map.line_error(line, format!("expected key=value, got `{trimmed}`")));
            };
            let key = key.trim();
            if key.is_empty() {
                return Err(map.line_error(line, "empty key".to_string()));
            }
            if map.entries.contains_key(key) {
                return Err(map.line_error(line, format!("duplicate key `{key}`")));
            }
            map.entries.insert(
                key.to_string(),
                Entry {
                    value: value.trim().to_string(),
                    line,
                },
            );
        }
        Ok(map)
    }

    fn line_error(&self, line: usize, message: String) -> Error {
        Error::ConfigLine {
            path: self.source.clone(),
            line,
            message,
        }
    }

    /// Insert or override a value (line 0 marks a non-file origin such as a CLI flag).
    pub fn set(&mut self, key: impl Into<String>, value: impl Into<String>) {
        self.entries.insert(
            key.into(),
            Entry {
                value: value.into(),
                line: 0,
            },
        );
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(|e| e.value.as_str())
    }

    pub fn contains(&self, key: &str) -> bool {
        self.entries.contains_key(key)
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    fn field_error(&self, key: &str, message: String) -> Error {
        match self.entries.get(key) {
            Some(e) if e.line > 0 => self.line_error(e.line, format!("field `{key}`: {message}")),
            _ => Error::Config(format!("field `{key}`: {message}")),
        }
    }

    /// Parse a value, if present, reporting the offending line on failure.
    pub fn parse_opt<T>(&self, key: &str) -> Result<Option<T>>
    where
        T: FromStr,
        T::Err: Display,
    {
        match self.entries.get(key) {
            None => Ok(None),
            Some(e) => e
                .value
                .parse::<T>()
                .map(Some)
                .map_err(|err| self.field_error(key, format!("cannot parse `{}`: {err}", e.value))),
        }
    }

    pub fn parse_or<T>(&self, key: &str, default: T) -> Result<T>
    where
        T: FromStr,
        T::Err: Display,
    {
        Ok(self.parse_opt(key)?.unwrap_or(default))
    }

    pub fn require<T>(&self, key: &str) -> Result<T>
    where
        T: FromStr,
        T::Err: Display,
    {
        self.parse_opt(key)?
            .ok_or_else(|| Error::Config(format!("{}: missing field `{key}`", self.source)))
    }

    /// Comma-separated list.
    pub fn parse_list<T>(&self, key: &str) -> Result<Option<Vec<T>>>
    where
        T: FromStr,
        T::Err: Display,
    {
        let Some(raw) = self.get(key) else {
            return Ok(None);
        };
        if raw.is_empty() {
            return Ok(Some(Vec::new()));
        }
        raw.split(',')
            .map(|item| {
                item.trim()
                    .parse::<T>()
                    .map_err(|err| self.field_error(key, format!("bad list item `{item}`: {err}")))
            })
            .collect::<Result<Vec<_>>>()
            .map(Some)
    }

    /// Reject keys under `prefix` that are not in `known`.
    pub fn reject_unknown(&self, prefix: &str, known: &[&str]) -> Result<()> {
        for (key, entry) in &self.entries {
            if let Some(rest) = key.strip_prefix(prefix) {
                if !known.contains(&rest) {
                    let msg = format!("unknown field `{key}`");
                    return Err(if entry.line > 0 {
                        self.line_error(entry.line, msg)
                    } else {
                        Error::Config(msg)
                    });
                }
            }
        }
        Ok(())
    }

    /// Reject keys whose section prefix is not one of `sections`.
    pub fn reject_unknown_sections(&self, sections: &[&str]) -> Result<()> {
        for (key, entry) in &self.entries {
            let section = key.split('.').next().unwrap_or("");
            if !key.contains('.') || !sections.contains(&section) {
                let msg = format!("unknown section in `{key}`");
                return Err(if entry.line > 0 {
                    self.line_error(entry.line, msg)
                } else {
                    Error::Config(msg)
                });
            }
        }
        Ok(())
    }
}

/// Render `(key, value)` pairs as a block, one per line, in the given order.
pub fn render<'a>(pairs: impl IntoIterator<Item = (&'a str, String)>) -> String {
    let mut out = String::new();
    for (k, v) in pairs {
        out.push_str(k);
        out.push('=');
        out.push_str(&v);
        out.push('\n');
    }
    out
}

/// Comma-join with the shortest round-trip representation of each item.
pub fn join<T: Display>(items: &[T]) -> String {
    items.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}
