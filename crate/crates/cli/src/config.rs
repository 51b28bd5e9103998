//! Flat `key=value` run configuration.
//!
//! One assignment per line, whitespace around keys and values is trimmed,
//! blank lines and lines starting with `#` are skipped. Command-line
//! overrides are applied after the file; a repeated key keeps its last value.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use crate::error::CliError;

/// Every key any subcommand understands.
pub const KNOWN_KEYS: &[&str] = &[
    "activation",
    "aggregator",
    "batch_size",
    "classes",
    "count",
    "dataset",
    "direction",
    "epochs",
    "eval_sizes",
    "extractor",
    "grid_step",
    "h",
    "head_hidden",
    "lr",
    "mode",
    "model",
    "n_max",
    "n_min",
    "neurons",
    "output_dir",
    "p_schedule",
    "positional",
    "profile_set",
    "resize_method",
    "resize_sizes",
    "san_outputs",
    "seed",
    "set_size",
    "spread",
    "test_count",
    "test_images",
    "test_labels",
    "train_images",
    "train_labels",
    "universe_max",
    "validation_fraction",
    "values",
    "cases",
];

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let mut config = Self::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| CliError::Config(format!("line {}: expected key=value, got `{line}`", lineno + 1)))?;
            config.set(key.trim(), value.trim())?;
        }
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Applies `key=value` overrides in order.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, overrides: &[S]) -> Result<(), CliError> {
        for o in overrides {
            let o = o.as_ref();
            let (key, value) = o
                .split_once('=')
                .ok_or_else(|| CliError::Config(format!("override `{o}` is not key=value")))?;
            self.set(key.trim(), value.trim())?;
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), CliError> {
        if !KNOWN_KEYS.contains(&key) {
            return Err(CliError::Config(format!("unknown config key `{key}`")));
        }
        self.values.insert(key.to_string(), value.to_string());
        Ok(())
    }

    pub fn raw(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str)
    }

    pub fn get<T>(&self, key: &str) -> Result<Option<T>, CliError>
    where
        T: FromStr,
        T::Err: Display,
    {
        self.raw(key)
            .map(|v| {
                v.parse()
                    .map_err(|e| CliError::Config(format!("invalid value `{v}` for `{key}`: {e}")))
            })
            .transpose()
    }

    pub fn get_or<T>(&self, key: &str, default: T) -> Result<T, CliError>
    where
        T: FromStr,
        T::Err: Display,
    {
        Ok(self.get(key)?.unwrap_or(default))
    }

    pub fn require<T>(&self, key: &str) -> Result<T, CliError>
    where
        T: FromStr,
        T::Err: Display,
    {
        self.get(key)?
            .ok_or_else(|| CliError::Config(format!("missing required key `{key}`")))
    }

    /// Comma-separated list; an empty value is an empty list.
    pub fn list<T>(&self, key: &str) -> Result<Option<Vec<T>>, CliError>
    where
        T: FromStr,
        T::Err: Display,
    {
        let Some(v) = self.raw(key) else { return Ok(None) };
        v.split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| {
                s.parse()
                    .map_err(|e| CliError::Config(format!("invalid value `{s}` for `{key}`: {e}")))
            })
            .collect::<Result<Vec<T>, _>>()
            .map(Some)
    }

    pub fn list_or<T>(&self, key: &str, default: Vec<T>) -> Result<Vec<T>, CliError>
    where
        T: FromStr,
        T::Err: Display,
    {
        Ok(self.list(key)?.unwrap_or(default))
    }
}
