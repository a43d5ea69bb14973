//! Line-oriented `key = value` text format shared by schedule, model and
//! training configuration files.
//!
//! Blank lines and lines starting with `#` are ignored. Keys are unique;
//! a repeated key is an error reported with its line number.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Default, PartialEq)]
pub struct KvDoc {
    source: String,
    entries: BTreeMap<String, (usize, String)>,
    order: Vec<String>,
}

impl KvDoc {
    pub fn new() -> Self {
        Self {
            source: "<memory>".to_string(),
            ..Default::default()
        }
    }

    pub fn parse(text: &str, source: &str) -> Result<Self> {
        let mut doc = KvDoc {
            source: source.to_string(),
            ..Default::default()
        };
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let trimmed = raw.trim();
            if trimmed.is_empty() || trimmed.starts_with('#') {
                continue;
            }
            let Some((key, value)) = trimmed.split_once('=') else {
                return Err(
                    doc.error_at(line, format!("expected `key = value`, found `{trimmed}`"))
                );
            };
            let key = key.trim();
            if key.is_empty() {
                return Err(doc.error_at(line, "empty key"));
            }
            let value = strip_comment(value).trim().to_string();
            if doc.entries.contains_key(key) {
                return Err(doc.error_at(line, format!("duplicate key `{key}`")));
            }
            doc.order.push(key.to_string());
            doc.entries.insert(key.to_string(), (line, value));
        }
        Ok(doc)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, &path.display().to_string())
    }

    pub fn set(&mut self, key: &str, value: impl ToString) {
        if !self.entries.contains_key(key) {
            self.order.push(key.to_string());
        }
        self.entries.insert(key.to_string(), (0, value.to_string()));
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(|(_, v)| v.as_str())
    }

    pub fn contains(&self, key: &str) -> bool {
        self.entries.contains_key(key)
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.order.iter().map(String::as_str)
    }

    pub fn line_of(&self, key: &str) -> usize {
        self.entries.get(key).map(|(l, _)| *l).unwrap_or(0)
    }

    pub fn require(&self, key: &str) -> Result<&str> {
        self.get(key)
            .ok_or_else(|| self.error_at(0, format!("missing required key `{key}`")))
    }

    /// Parses `key` with `FromStr`, or returns `default` when absent.
    pub fn parse_or<T: FromStr>(&self, key: &str, default: T) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        match self.get(key) {
            None => Ok(default),
            Some(_) => self.parse_value(key),
        }
    }

    pub fn parse_value<T: FromStr>(&self, key: &str) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        let raw = self.require(key)?;
        raw.parse::<T>().map_err(|e| {
            self.error_at(
                self.line_of(key),
                format!("bad value for `{key}` ({raw}): {e}"),
            )
        })
    }

    /// Parses a comma separated list.
    pub fn parse_list<T: FromStr>(&self, key: &str) -> Result<Vec<T>>
    where
        T::Err: std::fmt::Display,
    {
        let raw = self.require(key)?;
        parse_list(raw)
            .map_err(|e| self.error_at(self.line_of(key), format!("bad list for `{key}`: {e}")))
    }

    pub fn error_at(&self, line: usize, message: impl Into<String>) -> Error {
        Error::Config {
            path: self.source.clone(),
            line,
            message: message.into(),
        }
    }

    /// Restricts the document to keys starting with `prefix.`, with the prefix removed.
    pub fn section(&self, prefix: &str) -> KvDoc {
        let mut out = KvDoc {
            source: self.source.clone(),
            ..Default::default()
        };
        let pfx = format!("{prefix}.");
        for key in &self.order {
            if let Some(rest) = key.strip_prefix(&pfx) {
                let (line, value) = self.entries[key].clone();
                out.order.push(rest.to_string());
                out.entries.insert(rest.to_string(), (line, value));
            }
        }
        out
    }

    pub fn merge_section(&mut self, prefix: &str, other: &KvDoc) {
        for key in other.keys() {
            let value = other.get(key).unwrap_or_default().to_string();
            self.set(&format!("{prefix}.{key}"), value);
        }
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for key in &self.order {
            let _ = writeln!(out, "{key} = {}", self.entries[key].1);
        }
        out
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }
}

fn strip_comment(value: &str) -> &str {
    match value.find(" #") {
        Some(i) => &value[..i],
        None => value,
    }
}

pub fn parse_list<T: FromStr>(raw: &str) -> std::result::Result<Vec<T>, String>
where
    T::Err: std::fmt::Display,
{
    raw.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<T>().map_err(|e| format!("`{s}`: {e}")))
        .collect()
}

pub fn join_list<T: std::fmt::Display>(values: &[T]) -> String {
    values
        .iter()
        .map(ToString::to_string)
        .collect::<Vec<_>>()
        .join(", ")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_and_reports_lines() {
        let doc = KvDoc::parse("# c\na = 1\n\nb = x, y # trailing\n", "t").unwrap();
        assert_eq!(doc.get("a"), Some("1"));
        assert_eq!(doc.get("b"), Some("x, y"));
        assert_eq!(doc.line_of("b"), 4);
        let err = KvDoc::parse("a = 1\nnot a pair\n", "cfg").unwrap_err();
        assert_eq!(
            err.to_string(),
            "cfg:2: expected `key = value`, found `not a pair`"
        );
        let err = KvDoc::parse("a = 1\na = 2\n", "cfg").unwrap_err();
        assert!(err.to_string().starts_with("cfg:2:"));
    }

    #[test]
    fn bad_value_carries_line() {
        let doc = KvDoc::parse("\n\nsteps = ten\n", "train.cfg").unwrap();
        let err = doc.parse_value::<u64>("steps").unwrap_err();
        assert!(err.to_string().starts_with("train.cfg:3:"), "{err}");
    }

    #[test]
    fn sections_round_trip() {
        let mut doc = KvDoc::new();
        doc.set("model.channels", "8, 8");
        doc.set("other", 1);
        let model = doc.section("model");
        assert_eq!(model.parse_list::<usize>("channels").unwrap(), vec![8, 8]);
        let reparsed = KvDoc::parse(&doc.to_text(), "x").unwrap();
        assert_eq!(reparsed.get("model.channels"), Some("8, 8"));
    }
}
