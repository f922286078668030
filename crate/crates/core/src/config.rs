//! Flat `key = value` configuration files.
//!
//! One format serves every subcommand: blank lines and `#` comments are
//! skipped, keys are dot-separated lowercase paths, values are parsed on
//! demand by the typed getters. Unknown keys are tolerated so a single file
//! can configure data generation, training and evaluation together. Every run
//! writes back the fully-resolved settings it used (see
//! [`write_resolved_config`]).

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::rngutil::fnv1a64;

#[derive(Debug, Clone, Default)]
pub struct Config {
    map: BTreeMap<String, String>,
}

impl Config {
    pub fn empty() -> Self {
        Self::default()
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut map = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected 'key = value', got {raw:?}", lineno + 1))
            })?;
            let key = k.trim().to_string();
            if key.is_empty() {
                return Err(Error::Config(format!("line {}: empty key", lineno + 1)));
            }
            map.insert(key, v.trim().to_string());
        }
        Ok(Config { map })
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn set(&mut self, key: impl Into<String>, value: impl Into<String>) {
        self.map.insert(key.into(), value.into());
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.map.get(key).map(String::as_str)
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.map.keys().map(String::as_str)
    }

    pub fn entries(&self) -> impl Iterator<Item = (&str, &str)> {
        self.map.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }

    pub fn str_or(&self, key: &str, default: &str) -> String {
        self.get(key).unwrap_or(default).to_string()
    }

    pub fn f64_or(&self, key: &str, default: f64) -> Result<f64> {
        match self.get(key) {
            None => Ok(default),
            Some(v) => v
                .parse()
                .map_err(|_| Error::Config(format!("key {key}: expected a number, got {v:?}"))),
        }
    }

    pub fn usize_or(&self, key: &str, default: usize) -> Result<usize> {
        match self.get(key) {
            None => Ok(default),
            Some(v) => v
                .parse()
                .map_err(|_| Error::Config(format!("key {key}: expected an integer, got {v:?}"))),
        }
    }

    pub fn u64_or(&self, key: &str, default: u64) -> Result<u64> {
        match self.get(key) {
            None => Ok(default),
            Some(v) => v
                .parse()
                .map_err(|_| Error::Config(format!("key {key}: expected an integer, got {v:?}"))),
        }
    }

    pub fn bool_or(&self, key: &str, default: bool) -> Result<bool> {
        match self.get(key) {
            None => Ok(default),
            Some("true") | Some("1") | Some("yes") => Ok(true),
            Some("false") | Some("0") | Some("no") => Ok(false),
            Some(v) => Err(Error::Config(format!("key {key}: expected true/false, got {v:?}"))),
        }
    }

    /// Value restricted to a fixed set of identifiers.
    pub fn choice_or(&self, key: &str, default: &str, allowed: &[&str]) -> Result<String> {
        let v = self.str_or(key, default);
        if allowed.contains(&v.as_str()) {
            Ok(v)
        } else {
            Err(Error::Config(format!("key {key}: {v:?} is not one of {allowed:?}")))
        }
    }
}

/// Canonical text for a resolved settings list: sorted `key = value` lines.
pub fn resolved_text(settings: &[(String, String)]) -> String {
    let mut sorted: Vec<_> = settings.to_vec();
    sorted.sort();
    let mut out = String::new();
    for (k, v) in sorted {
        out.push_str(&format!("{k} = {v}\n"));
    }
    out
}

/// Hex digest identifying a resolved configuration.
pub fn config_digest(settings: &[(String, String)]) -> String {
    format!("{:016x}", fnv1a64(resolved_text(settings).as_bytes()))
}

/// Writes `resolved-config.txt` (sorted settings plus a digest header) into a
/// run directory.
pub fn write_resolved_config(dir: &Path, settings: &[(String, String)]) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let body = resolved_text(settings);
    let digest = config_digest(settings);
    std::fs::write(dir.join("resolved-config.txt"), format!("# digest {digest}\n{body}"))?;
    Ok(())
}
