//! Flat key=value configuration files with `[section]` headers.
//!
//! Format: `#` starts a comment, blank lines are ignored, `key = value`
//! pairs belong to the most recent `[section]` header (or the unnamed root
//! section). Every consumer reads through a [`SectionReader`], which records
//! the keys it touched so unknown keys can be rejected as typos.

use crate::{Error, Result};
use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

#[derive(Debug, Clone, Default)]
pub struct ConfigFile {
    sections: BTreeMap<String, BTreeMap<String, String>>,
}

impl ConfigFile {
    pub fn parse(text: &str) -> Result<Self> {
        let mut sections: BTreeMap<String, BTreeMap<String, String>> = BTreeMap::new();
        let mut current = String::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if let Some(name) = line.strip_prefix('[') {
                let name = name.strip_suffix(']').ok_or_else(|| {
                    Error::Config(format!("line {}: unterminated section header", lineno + 1))
                })?;
                current = name.trim().to_string();
                sections.entry(current.clone()).or_default();
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected key = value", lineno + 1))
            })?;
            let key = key.trim().to_string();
            if key.is_empty() {
                return Err(Error::Config(format!("line {}: empty key", lineno + 1)));
            }
            let prev = sections
                .entry(current.clone())
                .or_default()
                .insert(key.clone(), value.trim().to_string());
            if prev.is_some() {
                return Err(Error::Config(format!(
                    "line {}: duplicate key '{key}' in section '{current}'",
                    lineno + 1
                )));
            }
        }
        Ok(ConfigFile { sections })
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        Self::parse(&text)
    }

    /// Applies a `section.key=value` (or `key=value` for the root section)
    /// override, as produced by CLI flags.
    pub fn set_override(&mut self, spec: &str) -> Result<()> {
        let (path, value) = spec
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override '{spec}' is not key=value")))?;
        let (section, key) = match path.split_once('.') {
            Some((s, k)) => (s.trim(), k.trim()),
            None => ("", path.trim()),
        };
        self.sections
            .entry(section.to_string())
            .or_default()
            .insert(key.to_string(), value.trim().to_string());
        Ok(())
    }

    pub fn section(&self, name: &str) -> SectionReader<'_> {
        static EMPTY: BTreeMap<String, String> = BTreeMap::new();
        SectionReader {
            name: name.to_string(),
            entries: self.sections.get(name).unwrap_or(&EMPTY),
            read: BTreeSet::new(),
        }
    }

    pub fn section_names(&self) -> impl Iterator<Item = &str> {
        self.sections.keys().map(|s| s.as_str())
    }

    /// Errors if any section other than the listed ones is present.
    pub fn expect_sections(&self, allowed: &[&str]) -> Result<()> {
        for name in self.sections.keys() {
            if !name.is_empty() && !allowed.contains(&name.as_str()) {
                return Err(Error::Config(format!("unknown section '[{name}]'")));
            }
        }
        Ok(())
    }

    /// Canonical text form, used to echo the effective config for provenance.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (name, entries) in &self.sections {
            if !name.is_empty() {
                out.push_str(&format!("[{name}]\n"));
            }
            for (k, v) in entries {
                out.push_str(&format!("{k} = {v}\n"));
            }
        }
        out
    }
}

/// Typed access to one section; tracks reads for unknown-key detection.
pub struct SectionReader<'a> {
    name: String,
    entries: &'a BTreeMap<String, String>,
    read: BTreeSet<String>,
}

impl<'a> SectionReader<'a> {
    fn raw(&mut self, key: &str) -> Option<&'a str> {
        self.read.insert(key.to_string());
        self.entries.get(key).map(|s| s.as_str())
    }

    pub fn get_f64(&mut self, key: &str, default: f64) -> Result<f64> {
        match self.raw(key) {
            None => Ok(default),
            Some(s) => s
                .parse()
                .map_err(|_| self.type_error(key, s, "a real number")),
        }
    }

    pub fn get_usize(&mut self, key: &str, default: usize) -> Result<usize> {
        match self.raw(key) {
            None => Ok(default),
            Some(s) => s
                .parse()
                .map_err(|_| self.type_error(key, s, "a non-negative integer")),
        }
    }

    pub fn get_u64(&mut self, key: &str, default: u64) -> Result<u64> {
        match self.raw(key) {
            None => Ok(default),
            Some(s) => s
                .parse()
                .map_err(|_| self.type_error(key, s, "a non-negative integer")),
        }
    }

    pub fn get_bool(&mut self, key: &str, default: bool) -> Result<bool> {
        match self.raw(key) {
            None => Ok(default),
            Some("true") | Some("1") | Some("yes") => Ok(true),
            Some("false") | Some("0") | Some("no") => Ok(false),
            Some(s) => Err(self.type_error(key, s, "a boolean")),
        }
    }

    pub fn get_string(&mut self, key: &str, default: &str) -> String {
        self.raw(key).unwrap_or(default).to_string()
    }

    /// Comma-separated list of positive integers, e.g. `8,12,16`.
    pub fn get_usize_list(&mut self, key: &str, default: &[usize]) -> Result<Vec<usize>> {
        match self.raw(key) {
            None => Ok(default.to_vec()),
            Some(s) => s
                .split(',')
                .map(|t| {
                    t.trim()
                        .parse()
                        .map_err(|_| self.type_error(key, t, "an integer list"))
                })
                .collect(),
        }
    }

    fn type_error(&self, key: &str, value: &str, expected: &str) -> Error {
        Error::Config(format!(
            "key '{}' in section '[{}]': '{}' is not {}",
            key, self.name, value, expected
        ))
    }

    /// Errors if the section contains keys that were never read.
    pub fn finish(self) -> Result<()> {
        for key in self.entries.keys() {
            if !self.read.contains(key) {
                return Err(Error::Config(format!(
                    "unknown key '{}' in section '[{}]'",
                    key, self.name
                )));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_sections_comments_and_values() {
        let cfg = ConfigFile::parse(
            "# top comment\nseed = 7\n[detect]\nk = 16\nalpha = 1.5\n\n[shape]\ndelta = 0.1\n",
        )
        .unwrap();
        let mut root = cfg.section("");
        assert_eq!(root.get_u64("seed", 0).unwrap(), 7);
        root.finish().unwrap();
        let mut d = cfg.section("detect");
        assert_eq!(d.get_usize("k", 0).unwrap(), 16);
        assert_eq!(d.get_f64("alpha", 0.0).unwrap(), 1.5);
        d.finish().unwrap();
    }

    #[test]
    fn rejects_unknown_keys() {
        let cfg = ConfigFile::parse("[detect]\nk = 16\nkk = 3\n").unwrap();
        let mut d = cfg.section("detect");
        let _ = d.get_usize("k", 0);
        assert!(d.finish().is_err());
    }

    #[test]
    fn rejects_malformed_lines_and_duplicates() {
        assert!(ConfigFile::parse("novalue\n").is_err());
        assert!(ConfigFile::parse("[open\n").is_err());
        assert!(ConfigFile::parse("a = 1\na = 2\n").is_err());
    }

    #[test]
    fn overrides_replace_file_values() {
        let mut cfg = ConfigFile::parse("[detect]\nk = 16\n").unwrap();
        cfg.set_override("detect.k=8").unwrap();
        cfg.set_override("seed=3").unwrap();
        assert_eq!(cfg.section("detect").get_usize("k", 0).unwrap(), 8);
        assert_eq!(cfg.section("").get_u64("seed", 0).unwrap(), 3);
    }
}
