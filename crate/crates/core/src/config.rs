//! Flat `key = value` configuration files with `[problem]`,
//! `[discretization]` and `[experiment]` sections.
//!
//! ```text
//! # comment
//! [problem]
//! preset = "manufactured1d"
//! T = 1
//! [discretization]
//! n = 100
//! ```
//!
//! Values are either double-quoted strings (expressions, names, paths) or
//! bare tokens (numbers, booleans, comma lists). A `#` outside quotes
//! starts a comment.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::str::FromStr;

use thiserror::Error;

pub const SECTIONS: [&str; 3] = ["problem", "discretization", "experiment"];

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ConfigError {
    #[error("line {line}: {msg}")]
    Syntax { line: usize, msg: String },
    #[error("unknown key `{key}` in [{section}]")]
    UnknownKey { section: String, key: String },
    #[error("missing mandatory key `{key}` in [{section}]")]
    Missing { section: String, key: String },
    #[error("[{section}] {key}: cannot read `{value}` as {expected}")]
    BadValue {
        section: String,
        key: String,
        value: String,
        expected: &'static str,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub value: String,
    pub quoted: bool,
    pub line: usize,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Document {
    sections: BTreeMap<String, BTreeMap<String, Entry>>,
}

impl Document {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut doc = Document::default();
        let mut current: Option<String> = None;
        for (k, raw) in text.lines().enumerate() {
            let line = k + 1;
            let err = |msg: &str| ConfigError::Syntax {
                line,
                msg: msg.to_string(),
            };
            let trimmed = raw.trim();
            if trimmed.is_empty() || trimmed.starts_with('#') {
                continue;
            }
            if let Some(rest) = trimmed.strip_prefix('[') {
                let name = rest
                    .split_once(']')
                    .filter(|(_, tail)| tail.trim().is_empty() || tail.trim().starts_with('#'))
                    .map(|(n, _)| n.trim())
                    .ok_or_else(|| err("malformed section header"))?;
                if !SECTIONS.contains(&name) {
                    return Err(err(&format!("unknown section [{name}]")));
                }
                doc.sections.entry(name.to_string()).or_default();
                current = Some(name.to_string());
                continue;
            }
            let section = current
                .as_ref()
                .ok_or_else(|| err("key outside of any section"))?;
            let (key, rest) = trimmed
                .split_once('=')
                .ok_or_else(|| err("expected `key = value`"))?;
            let key = key.trim();
            if key.is_empty() || !key.chars().all(|c| c.is_ascii_alphanumeric() || c == '_') {
                return Err(err("invalid key"));
            }
            let rest = rest.trim();
            let (value, quoted) = if let Some(body) = rest.strip_prefix('"') {
                let (inner, tail) = body
                    .split_once('"')
                    .ok_or_else(|| err("unterminated string"))?;
                let tail = tail.trim();
                if !(tail.is_empty() || tail.starts_with('#')) {
                    return Err(err("trailing characters after string"));
                }
                (inner.to_string(), true)
            } else {
                let v = rest.split('#').next().unwrap_or("").trim();
                if v.is_empty() {
                    return Err(err("empty value"));
                }
                (v.to_string(), false)
            };
            let entries = doc.sections.get_mut(section).expect("section registered");
            if entries.contains_key(key) {
                return Err(err(&format!("duplicate key `{key}`")));
            }
            entries.insert(
                key.to_string(),
                Entry {
                    value,
                    quoted,
                    line,
                },
            );
        }
        Ok(doc)
    }

    pub fn get(&self, section: &str, key: &str) -> Option<&Entry> {
        self.sections.get(section).and_then(|s| s.get(key))
    }

    pub fn get_str(&self, section: &str, key: &str) -> Option<&str> {
        self.get(section, key).map(|e| e.value.as_str())
    }

    pub fn get_parsed<T: FromStr>(
        &self,
        section: &str,
        key: &str,
        expected: &'static str,
    ) -> Result<Option<T>, ConfigError> {
        match self.get(section, key) {
            None => Ok(None),
            Some(e) => e.value.trim().parse::<T>().map(Some).map_err(|_| ConfigError::BadValue {
                section: section.to_string(),
                key: key.to_string(),
                value: e.value.clone(),
                expected,
            }),
        }
    }

    pub fn get_f64(&self, section: &str, key: &str) -> Result<Option<f64>, ConfigError> {
        let v: Option<f64> = self.get_parsed(section, key, "a number")?;
        match v {
            Some(x) if !x.is_finite() => Err(ConfigError::BadValue {
                section: section.into(),
                key: key.into(),
                value: x.to_string(),
                expected: "a finite number",
            }),
            other => Ok(other),
        }
    }

    pub fn get_usize(&self, section: &str, key: &str) -> Result<Option<usize>, ConfigError> {
        self.get_parsed(section, key, "a non-negative integer")
    }

    pub fn get_bool(&self, section: &str, key: &str) -> Result<Option<bool>, ConfigError> {
        self.get_parsed(section, key, "true or false")
    }

    pub fn get_list<T: FromStr>(
        &self,
        section: &str,
        key: &str,
        expected: &'static str,
    ) -> Result<Option<Vec<T>>, ConfigError> {
        let Some(e) = self.get(section, key) else {
            return Ok(None);
        };
        parse_list(&e.value)
            .map(Some)
            .ok_or_else(|| ConfigError::BadValue {
                section: section.into(),
                key: key.into(),
                value: e.value.clone(),
                expected,
            })
    }

    /// Reject keys of `section` that are not in `allowed`.
    pub fn check_keys(&self, section: &str, allowed: &[&str]) -> Result<(), ConfigError> {
        if let Some(entries) = self.sections.get(section) {
            if let Some(k) = entries.keys().find(|k| !allowed.contains(&k.as_str())) {
                return Err(ConfigError::UnknownKey {
                    section: section.into(),
                    key: k.clone(),
                });
            }
        }
        Ok(())
    }
}

/// Comma-separated list of values.
pub fn parse_list<T: FromStr>(s: &str) -> Option<Vec<T>> {
    let items: Option<Vec<T>> = s
        .split(',')
        .map(|t| t.trim())
        .filter(|t| !t.is_empty())
        .map(|t| t.parse().ok())
        .collect();
    items.filter(|v| !v.is_empty())
}

/// Accumulates a config file text section by section.
#[derive(Debug, Default)]
pub struct Writer {
    out: String,
}

impl Writer {
    pub fn section(&mut self, name: &str) -> &mut Self {
        if !self.out.is_empty() {
            self.out.push('\n');
        }
        let _ = writeln!(self.out, "[{name}]");
        self
    }

    pub fn quoted(&mut self, key: &str, value: impl std::fmt::Display) -> &mut Self {
        let _ = writeln!(self.out, "{key} = \"{value}\"");
        self
    }

    pub fn bare(&mut self, key: &str, value: impl std::fmt::Display) -> &mut Self {
        let _ = writeln!(self.out, "{key} = {value}");
        self
    }

    pub fn finish(self) -> String {
        self.out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_sections_comments_and_quotes() {
        let doc = Document::parse(
            "# header\n[problem]\nf = \"x # not a comment\"  # trailing\nT = 2.5 # horizon\n\n[discretization]\nn = 10\nlist = 1, 2,3\n",
        )
        .unwrap();
        assert_eq!(doc.get_str("problem", "f"), Some("x # not a comment"));
        assert!(doc.get("problem", "f").unwrap().quoted);
        assert_eq!(doc.get_f64("problem", "T").unwrap(), Some(2.5));
        assert_eq!(doc.get_usize("discretization", "n").unwrap(), Some(10));
        assert_eq!(
            doc.get_list::<usize>("discretization", "list", "ints").unwrap(),
            Some(vec![1, 2, 3])
        );
        assert_eq!(doc.get_f64("problem", "missing").unwrap(), None);
    }

    #[test]
    fn syntax_errors_carry_line() {
        for (text, line) in [
            ("n = 1", 1),
            ("[problem]\nf = \"x", 2),
            ("[problem]\nnovalue", 2),
            ("[bogus]", 1),
            ("[problem]\nT = 1\nT = 2", 3),
            ("[problem]\nT =", 2),
        ] {
            match Document::parse(text) {
                Err(ConfigError::Syntax { line: l, .. }) => assert_eq!(l, line, "{text}"),
                other => panic!("{text}: {other:?}"),
            }
        }
    }

    #[test]
    fn typed_getters_report_bad_values() {
        let doc = Document::parse("[discretization]\nn = ten\nT = inf\n").unwrap();
        assert!(matches!(
            doc.get_usize("discretization", "n"),
            Err(ConfigError::BadValue { .. })
        ));
        assert!(doc.get_f64("discretization", "T").is_err());
        assert!(matches!(
            doc.check_keys("discretization", &["n"]),
            Err(ConfigError::UnknownKey { .. })
        ));
    }
}
