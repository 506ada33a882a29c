use std::path::PathBuf;

use longmem::backends::BackendsConfig;
use longmem::context::StrategyConfig;
use longmem::{Error, Result};
use serde::{Deserialize, Serialize};

/// Server settings, read from TOML and then overridden by `LONGMEM_PORT`,
/// `LONGMEM_DATA_DIR` and the backend variables.
///
/// ```toml
/// port = 8080
/// data_dir = "data"
///
/// [default_strategy]
/// context_source = "predicted_summary"
/// augmentation = "fid"
///
/// [backends.generator]
/// name = "echo"
/// ```
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ServerConfig {
    pub port: u16,
    pub data_dir: PathBuf,
    pub default_strategy: StrategyConfig,
    pub backends: BackendsConfig,
}

impl Default for ServerConfig {
    fn default() -> Self {
        ServerConfig {
            port: 8080,
            data_dir: PathBuf::from("longmem-data"),
            default_strategy: StrategyConfig::default(),
            backends: BackendsConfig::default(),
        }
    }
}

impl ServerConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::InvalidInput(format!("server config: {e}")))
    }

    pub fn apply_overrides(&mut self, get: impl Fn(&str) -> Option<String>) -> Result<()> {
        if let Some(port) = get("LONGMEM_PORT") {
            self.port = port
                .parse()
                .map_err(|_| Error::InvalidInput(format!("LONGMEM_PORT={port:?} is not a port")))?;
        }
        if let Some(dir) = get("LONGMEM_DATA_DIR") {
            self.data_dir = dir.into();
        }
        self.backends.apply_overrides(get)
    }

    pub fn apply_env(&mut self) -> Result<()> {
        self.apply_overrides(|k| std::env::var(k).ok())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use longmem::context::Augmentation;

    #[test]
    fn toml_and_overrides() {
        let mut c = ServerConfig::from_toml(
            "port = 9000\n[default_strategy]\naugmentation = \"fid\"\nn_docs = 3\n",
        )
        .unwrap();
        assert_eq!(c.port, 9000);
        assert_eq!(c.default_strategy.augmentation, Augmentation::Fid);
        assert_eq!(c.default_strategy.n_docs, 3);
        c.apply_overrides(|k| match k {
            "LONGMEM_PORT" => Some("9100".into()),
            "LONGMEM_DATA_DIR" => Some("/tmp/x".into()),
            _ => None,
        })
        .unwrap();
        assert_eq!(c.port, 9100);
        assert_eq!(c.data_dir, PathBuf::from("/tmp/x"));
        assert!(c.apply_overrides(|k| (k == "LONGMEM_PORT").then(|| "http".into())).is_err());
        assert!(ServerConfig::from_toml("port = \"x\"").is_err());
    }
}
