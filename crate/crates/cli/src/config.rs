//! Flat `key = value` configuration files.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq)]
struct Entry {
    value: String,
    line: usize,
}

/// Parsed configuration; `#` starts a comment, blank lines are ignored.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Config {
    entries: BTreeMap<String, Entry>,
}

impl Config {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let mut entries = BTreeMap::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let (key, value) = content
                .split_once('=')
                .ok_or_else(|| CliError::config(None, format!("line {line}: expected `key = value`, got `{content}`")))?;
            let key = key.trim().to_string();
            if key.is_empty() {
                return Err(CliError::config(None, format!("line {line}: empty key")));
            }
            let entry = Entry { value: value.trim().to_string(), line };
            if let Some(prev) = entries.insert(key.clone(), entry) {
                return Err(CliError::config(Some(&key), format!("line {line}: duplicate key (first set on line {})", prev.line)));
            }
        }
        Ok(Self { entries })
    }

    pub fn from_file(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::config(None, format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(|e| e.value.as_str())
    }

    pub fn set(&mut self, key: &str, value: &str) {
        let line = self.entries.get(key).map_or(0, |e| e.line);
        self.entries.insert(key.to_string(), Entry { value: value.to_string(), line });
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }
}

/// Configuration values resolved against an experiment's defaults.
pub struct Params<'a> {
    config: &'a Config,
    defaults: &'a [(&'static str, &'static str)],
}

impl<'a> Params<'a> {
    /// Rejects keys that the experiment does not accept.
    pub fn new(config: &'a Config, defaults: &'a [(&'static str, &'static str)]) -> Result<Self, CliError> {
        for key in config.keys() {
            if key != "experiment" && !defaults.iter().any(|(k, _)| *k == key) {
                let valid: Vec<&str> = std::iter::once("experiment").chain(defaults.iter().map(|(k, _)| *k)).collect();
                return Err(CliError::config(Some(key), format!("unknown key; valid keys: {}", valid.join(", "))));
            }
        }
        Ok(Self { config, defaults })
    }

    pub fn raw(&self, key: &str) -> &str {
        self.config
            .get(key)
            .or_else(|| self.defaults.iter().find(|(k, _)| *k == key).map(|(_, v)| *v))
            .unwrap_or_else(|| panic!("experiment table lacks a default for `{key}`"))
    }

    /// `None` when the value is `auto`.
    pub fn auto(&self, key: &str) -> Option<&str> {
        Some(self.raw(key)).filter(|v| *v != "auto")
    }

    pub fn parse<T>(&self, key: &str) -> Result<T, CliError>
    where
        T: FromStr,
        T::Err: fmt::Display,
    {
        let raw = self.raw(key);
        raw.parse().map_err(|e| CliError::config(Some(key), format!("invalid value `{raw}`: {e}")))
    }

    pub fn parse_auto<T>(&self, key: &str) -> Result<Option<T>, CliError>
    where
        T: FromStr,
        T::Err: fmt::Display,
    {
        match self.auto(key) {
            None => Ok(None),
            Some(raw) => raw.parse().map(Some).map_err(|e| CliError::config(Some(key), format!("invalid value `{raw}`: {e}"))),
        }
    }

    /// Finite float.
    pub fn float(&self, key: &str) -> Result<f64, CliError> {
        let v: f64 = self.parse(key)?;
        if v.is_finite() {
            Ok(v)
        } else {
            Err(CliError::config(Some(key), "must be finite"))
        }
    }

    pub fn positive(&self, key: &str) -> Result<f64, CliError> {
        let v = self.float(key)?;
        if v > 0.0 {
            Ok(v)
        } else {
            Err(CliError::config(Some(key), format!("must be positive, got {v}")))
        }
    }

    /// Comma-separated floats, or `None` for `auto`.
    pub fn list(&self, key: &str) -> Result<Option<Vec<f64>>, CliError> {
        let Some(raw) = self.auto(key) else { return Ok(None) };
        raw.split(',')
            .map(|s| {
                let s = s.trim();
                s.parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| CliError::config(Some(key), format!("invalid number `{s}`")))
            })
            .collect::<Result<Vec<_>, _>>()
            .map(Some)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const DEFAULTS: &[(&str, &str)] = &[("tau", "0.01"), ("q0", "auto")];

    #[test]
    fn parses_comments_and_whitespace() {
        let cfg = Config::parse("# header\n tau = 0.1  # step\n\nexperiment=integrate\n").unwrap();
        assert_eq!(cfg.get("tau"), Some("0.1"));
        assert_eq!(cfg.get("experiment"), Some("integrate"));
    }

    #[test]
    fn rejects_malformed_and_duplicate_lines() {
        assert!(Config::parse("tau 0.1").is_err());
        let err = Config::parse("tau=1\ntau=2").unwrap_err();
        assert!(err.to_string().contains("tau"));
    }

    #[test]
    fn unknown_keys_list_valid_ones() {
        let cfg = Config::parse("tua = 0.1").unwrap();
        let err = Params::new(&cfg, DEFAULTS).err().unwrap();
        let msg = err.to_string();
        assert!(msg.contains("tua") && msg.contains("tau") && msg.contains("q0"), "{msg}");
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn typed_access() {
        let cfg = Config::parse("q0 = 1, -2.5").unwrap();
        let params = Params::new(&cfg, DEFAULTS).unwrap();
        assert_eq!(params.positive("tau").unwrap(), 0.01);
        assert_eq!(params.list("q0").unwrap(), Some(vec![1.0, -2.5]));
        let cfg = Config::parse("tau = -1").unwrap();
        assert!(Params::new(&cfg, DEFAULTS).unwrap().positive("tau").is_err());
    }
}
