//! TOML configuration file.
//!
//! ```toml
//! seed = 7
//! out = "runs/lol"
//!
//! [train]            # any TrainConfig field
//! steps = 2000
//! patch = 64
//! [train.net]
//! base_channels = 16
//! [train.ssn]
//! weights_path = "fcn.bin"
//! ```
//!
//! Unknown keys are rejected. Command-line flags win over file values.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sllen_core::trainer::TrainConfig;
use sllen_core::{Error, Result};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CliConfig {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub train: TrainConfig,
}

impl CliConfig {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Loads `path` when given, then applies the global flag overrides.
    pub fn resolve(path: Option<&Path>, seed: Option<u64>, out: Option<&Path>) -> Result<Self> {
        let mut cfg = match path {
            Some(p) => Self::load(p)?,
            None => Self::default(),
        };
        if let Some(s) = seed {
            cfg.seed = Some(s);
        }
        if let Some(o) = out {
            cfg.out = Some(o.to_path_buf());
        }
        if let Some(s) = cfg.seed {
            cfg.train.seed = s;
        }
        Ok(cfg)
    }

    pub fn out_dir(&self, fallback: &str) -> PathBuf {
        self.out.clone().unwrap_or_else(|| PathBuf::from(fallback))
    }
}
