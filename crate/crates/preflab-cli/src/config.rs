//! Layered configuration: defaults < TOML file < environment < flags.
//!
//! The file is flat key/value TOML with one section per command plus
//! `[common]` for `seed` and `out`. Environment overrides use the
//! `PREFLAB_` prefix with uppercase key names; the recognized variables are
//! `PREFLAB_SEED`, `PREFLAB_OUT`, `PREFLAB_BETA`, and `PREFLAB_LOSS` (the
//! last two as comma-separated lists). Every resolved value is echoed into
//! the run manifest.

use std::path::Path;

use crate::errors::CliError;

pub const ENV_PREFIX: &str = "PREFLAB_";

pub fn env_var(key: &str) -> Option<String> {
    std::env::var(format!("{ENV_PREFIX}{key}")).ok()
}

pub struct FileConfig {
    root: Option<toml::Table>,
}

impl FileConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let root = match path {
            None => None,
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| {
                    CliError::Config(format!("cannot read config {}: {e}", p.display()))
                })?;
                Some(text.parse::<toml::Table>().map_err(|e| {
                    CliError::Config(format!("cannot parse config {}: {e}", p.display()))
                })?)
            }
        };
        Ok(Self { root })
    }

    /// `[section].key`, falling back to `[common].key`.
    fn lookup(&self, section: &str, key: &str) -> Option<&toml::Value> {
        let root = self.root.as_ref()?;
        root.get(section)
            .and_then(|s| s.get(key))
            .or_else(|| root.get("common").and_then(|s| s.get(key)))
    }

    pub fn f64(&self, section: &str, key: &str) -> Result<Option<f64>, CliError> {
        match self.lookup(section, key) {
            None => Ok(None),
            Some(v) => v
                .as_float()
                .or_else(|| v.as_integer().map(|i| i as f64))
                .map(Some)
                .ok_or_else(|| bad_type(section, key, "a number")),
        }
    }

    pub fn u64(&self, section: &str, key: &str) -> Result<Option<u64>, CliError> {
        match self.lookup(section, key) {
            None => Ok(None),
            Some(v) => v
                .as_integer()
                .map(|i| i as u64)
                .map(Some)
                .ok_or_else(|| bad_type(section, key, "an integer")),
        }
    }

    pub fn usize(&self, section: &str, key: &str) -> Result<Option<usize>, CliError> {
        Ok(self.u64(section, key)?.map(|v| v as usize))
    }

    pub fn string(&self, section: &str, key: &str) -> Result<Option<String>, CliError> {
        match self.lookup(section, key) {
            None => Ok(None),
            Some(v) => v
                .as_str()
                .map(|s| s.to_string())
                .map(Some)
                .ok_or_else(|| bad_type(section, key, "a string")),
        }
    }

    pub fn f64_list(&self, section: &str, key: &str) -> Result<Option<Vec<f64>>, CliError> {
        match self.lookup(section, key) {
            None => Ok(None),
            Some(v) => {
                let arr = v
                    .as_array()
                    .ok_or_else(|| bad_type(section, key, "an array of numbers"))?;
                arr.iter()
                    .map(|x| {
                        x.as_float()
                            .or_else(|| x.as_integer().map(|i| i as f64))
                            .ok_or_else(|| bad_type(section, key, "an array of numbers"))
                    })
                    .collect::<Result<Vec<f64>, _>>()
                    .map(Some)
            }
        }
    }

    pub fn string_list(&self, section: &str, key: &str) -> Result<Option<Vec<String>>, CliError> {
        match self.lookup(section, key) {
            None => Ok(None),
            Some(v) => {
                let arr = v
                    .as_array()
                    .ok_or_else(|| bad_type(section, key, "an array of strings"))?;
                arr.iter()
                    .map(|x| {
                        x.as_str()
                            .map(|s| s.to_string())
                            .ok_or_else(|| bad_type(section, key, "an array of strings"))
                    })
                    .collect::<Result<Vec<String>, _>>()
                    .map(Some)
            }
        }
    }
}

fn bad_type(section: &str, key: &str, expected: &str) -> CliError {
    CliError::Config(format!("config [{section}].{key} must be {expected}"))
}

pub fn parse_env_f64_list(key: &str) -> Result<Option<Vec<f64>>, CliError> {
    match env_var(key) {
        None => Ok(None),
        Some(text) => text
            .split(',')
            .map(|t| {
                t.trim()
                    .parse::<f64>()
                    .map_err(|e| CliError::Config(format!("{ENV_PREFIX}{key}: {e}")))
            })
            .collect::<Result<Vec<f64>, _>>()
            .map(Some),
    }
}

pub fn parse_env_string_list(key: &str) -> Option<Vec<String>> {
    env_var(key).map(|text| text.split(',').map(|t| t.trim().to_string()).collect())
}

pub fn parse_env_u64(key: &str) -> Result<Option<u64>, CliError> {
    match env_var(key) {
        None => Ok(None),
        Some(text) => text
            .trim()
            .parse::<u64>()
            .map(Some)
            .map_err(|e| CliError::Config(format!("{ENV_PREFIX}{key}: {e}"))),
    }
}
