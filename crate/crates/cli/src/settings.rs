//! Flat key-value settings: a TOML file of top-level scalars, overridden by
//! `GRIFFONFORGE_<KEY>` environment variables, overridden by flags.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use crate::error::CliError;

pub const ENV_PREFIX: &str = "GRIFFONFORGE_";

/// Every key a config file may set.
pub const KEYS: &[&str] = &[
    "log_level",
    "seed",
    "lexicon",
    "min_tokens",
    "expert_config",
    "cache_dir",
    "concurrency",
    "max_transport_failure_rate",
    "data_dir",
    "listen",
    "lease_secs",
    "snapshot_every",
    "fsync",
    "backend",
    "mode",
    "n_tools",
    "tool_latency_ms",
    "corruption",
    "min_accuracy",
    "parallelism",
    "http_base_url",
    "http_model",
    "http_api_key_env",
    "http_timeout_ms",
    "max_objects",
];

#[derive(Debug, Clone, Default)]
pub struct Settings {
    values: BTreeMap<String, String>,
}

impl Settings {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let table: toml::Table = text
            .parse()
            .map_err(|e| CliError::schema(format!("config: {e}")))?;
        let mut values = BTreeMap::new();
        for (k, v) in table {
            if !KEYS.contains(&k.as_str()) {
                return Err(CliError::schema(format!("config: unknown key `{k}`")));
            }
            let s = match v {
                toml::Value::String(s) => s,
                toml::Value::Integer(i) => i.to_string(),
                toml::Value::Float(f) => f.to_string(),
                toml::Value::Boolean(b) => b.to_string(),
                other => {
                    return Err(CliError::schema(format!(
                        "config: key `{k}` must be a scalar, got {}",
                        other.type_str()
                    )))
                }
            };
            values.insert(k, s);
        }
        Ok(Self { values })
    }

    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| CliError::other(format!("{}: {e}", p.display())))?;
                Self::parse(&text)
            }
        }
    }

    /// Apply `GRIFFONFORGE_<KEY>` overrides for known keys.
    pub fn with_env(mut self, lookup: impl Fn(&str) -> Option<String>) -> Self {
        for key in KEYS {
            if let Some(v) = lookup(&format!("{ENV_PREFIX}{}", key.to_uppercase())) {
                self.values.insert((*key).to_string(), v);
            }
        }
        self
    }

    pub fn raw(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str)
    }

    /// `flag`, else the configured value, else `default`.
    pub fn pick<T: FromStr>(&self, flag: Option<T>, key: &str, default: T) -> Result<T, CliError>
    where
        T::Err: std::fmt::Display,
    {
        Ok(self.pick_opt(flag, key)?.unwrap_or(default))
    }

    pub fn pick_opt<T: FromStr>(&self, flag: Option<T>, key: &str) -> Result<Option<T>, CliError>
    where
        T::Err: std::fmt::Display,
    {
        if flag.is_some() {
            return Ok(flag);
        }
        self.raw(key)
            .map(|v| {
                v.parse::<T>()
                    .map_err(|e| CliError::schema(format!("config: `{key}` = `{v}`: {e}")))
            })
            .transpose()
    }
}
