//! Resolved run configuration: built-in defaults, then a JSON config file,
//! then overrides applied by the caller.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::bridge::BridgeConfig;
use crate::datagen::NoiseConfig;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::trainer::TrainConfig;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunPaths {
    pub clean: Option<PathBuf>,
    pub noisy: Option<PathBuf>,
    pub test: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub noise: NoiseConfig,
    pub bridge: BridgeConfig,
    /// Target size of the joint subword vocabulary.
    pub vocab_size: usize,
    pub paths: RunPaths,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            noise: NoiseConfig::default(),
            bridge: BridgeConfig::default(),
            vocab_size: 512,
            paths: RunPaths::default(),
        }
    }
}

impl RunConfig {
    /// Defaults overlaid with the keys present in a JSON file.
    pub fn from_file(path: &Path) -> Result<RunConfig> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Checks every numeric setting. Model `vocab_size` is excluded: it is
    /// replaced by the size of the trained vocabulary.
    pub fn validate(&self) -> Result<()> {
        let mut model = self.model.clone();
        model.vocab_size = model.vocab_size.max(4);
        model.validate()?;
        self.train.validate()?;
        self.noise.validate()?;
        self.bridge.validate()?;
        if self.vocab_size < 5 {
            return Err(Error::Config("vocab_size must be at least 5".into()));
        }
        if self.train.max_decode_len + 1 > self.model.max_positions {
            return Err(Error::Config(format!(
                "max_decode_len {} needs max_positions > {}",
                self.train.max_decode_len, self.train.max_decode_len
            )));
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partial_file_keeps_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        fs::write(&path, r#"{"train":{"steps":7},"model":{"embed_dim":32}}"#).unwrap();
        let cfg = RunConfig::from_file(&path).unwrap();
        assert_eq!(cfg.train.steps, 7);
        assert_eq!(cfg.train.batch_size, TrainConfig::default().batch_size);
        assert_eq!(cfg.model.embed_dim, 32);
        assert_eq!(cfg.model.heads, 4);
        assert!(cfg.validate().is_ok());
    }

    #[test]
    fn decode_len_must_fit_positions() {
        let mut cfg = RunConfig::default();
        cfg.train.max_decode_len = cfg.model.max_positions;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn json_round_trip() {
        let cfg = RunConfig::default();
        let back: RunConfig = serde_json::from_str(&cfg.to_json().unwrap()).unwrap();
        assert_eq!(back, cfg);
    }
}
