//! JSON form of [`ModelConfig`].

use std::path::Path;

use backlens_core::model::Activation;
use backlens_core::ModelConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Serialized mirror of [`ModelConfig`]. Missing fields take the toy
/// defaults; unknown fields are rejected by name.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConfigFile {
    pub n_layers: usize,
    pub d: usize,
    pub d_m: usize,
    pub vocab_size: usize,
    pub n_heads: usize,
    pub max_seq: usize,
    pub activation: String,
    pub use_final_ln: bool,
    pub seed: u64,
}

impl Default for ConfigFile {
    fn default() -> Self {
        ConfigFile::from(&ModelConfig::default())
    }
}

impl From<&ModelConfig> for ConfigFile {
    fn from(c: &ModelConfig) -> Self {
        ConfigFile {
            n_layers: c.n_layers,
            d: c.d,
            d_m: c.d_m,
            vocab_size: c.vocab_size,
            n_heads: c.n_heads,
            max_seq: c.max_seq,
            activation: c.activation.name().to_string(),
            use_final_ln: c.use_final_ln,
            seed: c.seed,
        }
    }
}

impl ConfigFile {
    /// Converts and validates.
    pub fn to_config(&self) -> backlens_core::Result<ModelConfig> {
        let activation =
            Activation::parse(&self.activation).ok_or_else(|| backlens_core::Error::InvalidConfig {
                field: "activation",
                reason: format!("unknown activation {:?} (expected gelu or relu)", self.activation),
            })?;
        let config = ModelConfig {
            n_layers: self.n_layers,
            d: self.d,
            d_m: self.d_m,
            vocab_size: self.vocab_size,
            n_heads: self.n_heads,
            max_seq: self.max_seq,
            activation,
            use_final_ln: self.use_final_ln,
            seed: self.seed,
        };
        config.validate()?;
        Ok(config)
    }
}

pub fn to_json(config: &ModelConfig) -> String {
    serde_json::to_string(&ConfigFile::from(config)).expect("config serializes")
}

pub fn to_json_pretty(config: &ModelConfig) -> String {
    serde_json::to_string_pretty(&ConfigFile::from(config)).expect("config serializes")
}

pub fn parse(text: &str, path: &Path) -> Result<ModelConfig> {
    let file: ConfigFile = serde_json::from_str(text).map_err(|e| Error::format(path, e.to_string()))?;
    Ok(file.to_config()?)
}

pub fn read(path: &Path) -> Result<ModelConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse(&text, path)
}

/// SHA-256 of the compact JSON form.
pub fn hash(config: &ModelConfig) -> String {
    hex::encode(Sha256::digest(to_json(config).as_bytes()))
}
