//! Key-value config files that override command-line flags.
//!
//! The file is TOML. Top-level keys apply to every command (`workers`), and a
//! table named after a subcommand overrides that subcommand's flags, using the
//! flag names without the leading dashes:
//!
//! ```toml
//! workers = 2
//!
//! [train]
//! lr = 0.001
//! steps = 2000
//!
//! [analyze]
//! suite = "all"
//! pooled-stats = true
//! ```

use std::fs;
use std::path::Path;

use anyhow::{Context, Result};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

#[derive(Debug, Default, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub struct ConfigFile {
    pub workers: Option<usize>,
    #[serde(rename = "gen-world")]
    pub gen_world: Option<toml::Table>,
    pub train: Option<toml::Table>,
    pub eval: Option<toml::Table>,
    pub analyze: Option<toml::Table>,
    pub report: Option<toml::Table>,
}

#[derive(Debug, thiserror::Error)]
#[error("config file {path}: {message}")]
pub struct ConfigError {
    pub path: String,
    pub message: String,
}

impl ConfigFile {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        toml::from_str(&text)
            .map_err(|e| ConfigError { path: path.display().to_string(), message: e.to_string() }.into())
    }
}

/// Replaces every field of `args` named in `table`.
pub fn apply<T>(args: T, table: Option<&toml::Table>, section: &str) -> Result<T>
where
    T: Serialize + DeserializeOwned,
{
    let Some(table) = table else { return Ok(args) };
    let mut merged = toml::Table::try_from(&args).context("serializing arguments")?;
    for (k, v) in table {
        merged.insert(k.clone(), v.clone());
    }
    merged
        .try_into()
        .map_err(|e: toml::de::Error| ConfigError { path: format!("[{section}]"), message: e.to_string() }.into())
}
