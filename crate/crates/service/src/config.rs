//! The service's TOML configuration file.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use simbench_core::data::Domain;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid config {path}: {source}")]
    Parse {
        path: PathBuf,
        #[source]
        source: toml::de::Error,
    },
    #[error("config {0} lists no model directories")]
    NoModels(PathBuf),
    #[error("config {0} has an empty experimenter token")]
    EmptyToken(PathBuf),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ServiceConfig {
    #[serde(default = "default_bind")]
    pub bind: String,
    #[serde(default = "default_port")]
    pub port: u16,
    /// Session logs and the session index live here.
    pub data_dir: PathBuf,
    /// Shared secret for creating sessions and exporting responses.
    pub token: String,
    /// Checkpoint directory per domain, as written by `simbench train`.
    pub models: BTreeMap<Domain, PathBuf>,
}

fn default_bind() -> String {
    "127.0.0.1".into()
}

fn default_port() -> u16 {
    8080
}

impl ServiceConfig {
    /// Reads `path`; relative directories are resolved against the file's directory.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mut config: ServiceConfig = toml::from_str(&text).map_err(|source| ConfigError::Parse {
            path: path.to_path_buf(),
            source,
        })?;
        if config.models.is_empty() {
            return Err(ConfigError::NoModels(path.to_path_buf()));
        }
        if config.token.trim().is_empty() {
            return Err(ConfigError::EmptyToken(path.to_path_buf()));
        }
        let base = path.parent().unwrap_or(Path::new("."));
        config.data_dir = base.join(&config.data_dir);
        for dir in config.models.values_mut() {
            *dir = base.join(&*dir);
        }
        Ok(config)
    }
}
