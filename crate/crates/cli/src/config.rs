//! Flag > config file > default resolution.
//!
//! The config file is TOML. A key is looked up first in the table named after
//! the running command (`[train-controller]`), then at the top level, so
//! `epochs = 40` under `[train-explainer]` does not leak into controller runs.

use std::path::Path;

use serde::de::DeserializeOwned;

use crate::CliError;

#[derive(Clone, Debug, Default)]
pub struct Settings {
    table: toml::Table,
    command: String,
    resolved: serde_json::Map<String, serde_json::Value>,
}

impl Settings {
    pub fn load(path: Option<&Path>, command: &str) -> Result<Self, CliError> {
        let table = match path {
            None => toml::Table::new(),
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| CliError::usage(format!("config {}: {e}", p.display())))?;
                text.parse::<toml::Table>()
                    .map_err(|e| CliError::usage(format!("config {}: {e}", p.display())))?
            }
        };
        Ok(Settings {
            table,
            command: command.to_string(),
            resolved: serde_json::Map::new(),
        })
    }

    fn lookup(&self, key: &str) -> Option<&toml::Value> {
        let alt = key.replace('_', "-");
        self.table
            .get(&self.command)
            .and_then(|v| v.as_table())
            .and_then(|t| t.get(key).or_else(|| t.get(&alt)))
            .or_else(|| self.table.get(key).or_else(|| self.table.get(&alt)))
            .filter(|v| !v.is_table())
    }

    fn record<T: serde::Serialize>(&mut self, key: &str, value: &T) {
        if let Ok(v) = serde_json::to_value(value) {
            self.resolved.insert(key.to_string(), v);
        }
    }

    /// Resolves `key` and records the result for the run manifest.
    pub fn pick<T>(&mut self, key: &str, flag: Option<T>, default: T) -> Result<T, CliError>
    where
        T: DeserializeOwned + serde::Serialize,
    {
        let v = match flag {
            Some(v) => v,
            None => self.from_file(key)?.unwrap_or(default),
        };
        self.record(key, &v);
        Ok(v)
    }

    /// Like [`Settings::pick`] without a default.
    pub fn pick_opt<T>(&mut self, key: &str, flag: Option<T>) -> Result<Option<T>, CliError>
    where
        T: DeserializeOwned + serde::Serialize,
    {
        let v = match flag {
            Some(v) => Some(v),
            None => self.from_file(key)?,
        };
        if let Some(v) = &v {
            self.record(key, v);
        }
        Ok(v)
    }

    pub fn require<T>(&mut self, key: &str, flag: Option<T>) -> Result<T, CliError>
    where
        T: DeserializeOwned + serde::Serialize,
    {
        self.pick_opt(key, flag)?
            .ok_or_else(|| CliError::usage(format!("missing required --{}", key.replace('_', "-"))))
    }

    fn from_file<T: DeserializeOwned>(&self, key: &str) -> Result<Option<T>, CliError> {
        match self.lookup(key) {
            None => Ok(None),
            Some(v) => v
                .clone()
                .try_into()
                .map(Some)
                .map_err(|e| CliError::usage(format!("config key `{key}`: {e}"))),
        }
    }

    /// Every value resolved so far, for the run manifest.
    pub fn snapshot(&self) -> serde_json::Value {
        serde_json::Value::Object(self.resolved.clone())
    }
}
