//! Run configuration: one strict TOML file covering every subsystem, plus
//! the seed-precedence rules (CLI flag > `CONTRASTIVE_PATH_SEED` env var >
//! config file) and `resolved_config.toml` emission.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::SamplingPolicy;
use crate::eval::{EvalProtocol, SplitSpec};
use crate::model::{EncoderConfig, ProjectionConfig};
use crate::train::PretrainConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("failed to read config {path}: {source}")]
    Read { path: String, source: std::io::Error },
    #[error("failed to write {path}: {source}")]
    Write { path: String, source: std::io::Error },
    #[error("invalid config {path}: {source}")]
    Parse { path: String, source: toml::de::Error },
    #[error("invalid {name} value '{value}'")]
    BadValue { name: String, value: String },
}

pub type Result<T> = std::result::Result<T, ConfigError>;

/// Environment variable that overrides the config-file seed.
pub const SEED_ENV: &str = "CONTRASTIVE_PATH_SEED";

#[derive(Debug, Clone, Default, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub encoder: EncoderConfig,
    pub projection: ProjectionConfig,
    pub pretrain: PretrainConfig,
    pub eval: EvalProtocol,
    pub split: SplitSpec,
    pub sampling: SamplingPolicy,
}

impl RunConfig {
    /// Push one global seed into every seeded subsection.
    pub fn apply_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.pretrain.seed = seed;
        self.eval.seed = seed;
        self.split.seed = seed;
        self.sampling.seed = seed;
    }
}

/// Parse a config file; unknown keys are rejected.
pub fn load_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|source| ConfigError::Read { path: path.display().to_string(), source })?;
    toml::from_str(&text).map_err(|source| ConfigError::Parse { path: path.display().to_string(), source })
}

/// Fully materialized config, defaults included, stable key order.
pub fn resolved_toml(cfg: &RunConfig) -> String {
    toml::to_string_pretty(cfg).expect("config serializes")
}

pub fn write_resolved(cfg: &RunConfig, path: &Path) -> Result<()> {
    std::fs::write(path, resolved_toml(cfg))
        .map_err(|source| ConfigError::Write { path: path.display().to_string(), source })
}

/// Seed precedence: explicit flag, then the environment variable, then the
/// config file value.
pub fn resolve_seed(flag: Option<u64>, env_value: Option<&str>, config_seed: u64) -> Result<u64> {
    if let Some(s) = flag {
        return Ok(s);
    }
    if let Some(raw) = env_value {
        return raw
            .trim()
            .parse::<u64>()
            .map_err(|_| ConfigError::BadValue { name: SEED_ENV.into(), value: raw.into() });
    }
    Ok(config_seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_round_trips_through_toml() {
        let cfg = RunConfig::default();
        let text = resolved_toml(&cfg);
        let back: RunConfig = toml::from_str(&text).unwrap();
        assert_eq!(back, cfg);
        // resolved output is byte-stable
        assert_eq!(text, resolved_toml(&back));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = toml::from_str::<RunConfig>("seed = 1\nnot_a_key = true\n");
        assert!(err.is_err());
        let err = toml::from_str::<RunConfig>("[pretrain]\nbatchsize = 4\n");
        assert!(err.is_err());
    }

    #[test]
    fn partial_config_fills_defaults() {
        let cfg: RunConfig = toml::from_str("seed = 7\n[pretrain]\nbatch_size = 64\n").unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.pretrain.batch_size, 64);
        assert_eq!(cfg.pretrain.temperature, 0.1);
        assert_eq!(cfg.eval.batch_size, 128);
    }

    #[test]
    fn seed_precedence_flag_env_config() {
        assert_eq!(resolve_seed(Some(3), Some("5"), 9).unwrap(), 3);
        assert_eq!(resolve_seed(None, Some("5"), 9).unwrap(), 5);
        assert_eq!(resolve_seed(None, None, 9).unwrap(), 9);
        assert!(resolve_seed(None, Some("x"), 9).is_err());
    }

    #[test]
    fn apply_seed_reaches_every_section() {
        let mut cfg = RunConfig::default();
        cfg.apply_seed(42);
        assert_eq!(cfg.pretrain.seed, 42);
        assert_eq!(cfg.eval.seed, 42);
        assert_eq!(cfg.split.seed, 42);
        assert_eq!(cfg.sampling.seed, 42);
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        let mut cfg = RunConfig::default();
        cfg.apply_seed(11);
        write_resolved(&cfg, &path).unwrap();
        assert_eq!(load_config(&path).unwrap(), cfg);
    }
}
