//! Checkpoint container: every parameter tensor, the prototype memory, and
//! the config that produced them, under a version tag.

use std::fs;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::data::Config;
use crate::error::{Error, Result};
use crate::instance::InstanceHeads;
use crate::memory::PrototypeMemory;
use crate::model::SnippetNet;

pub const FORMAT_TAG: &str = "hrpro-ckpt-v1";

#[derive(Debug, Clone, Serialize, Deserialize)]
struct MemoryState {
    prototypes: Array2<f64>,
    mu: f64,
    initialized: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub config: Config,
    pub snippet_net: SnippetNet,
    memory: MemoryState,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub instance_heads: Option<InstanceHeads>,
}

impl Checkpoint {
    pub fn new(config: Config, snippet_net: SnippetNet, memory: &PrototypeMemory) -> Self {
        Checkpoint {
            format: FORMAT_TAG.to_string(),
            config,
            snippet_net,
            memory: MemoryState {
                prototypes: memory.prototypes().clone(),
                mu: memory.mu(),
                initialized: memory.is_initialized(),
            },
            instance_heads: None,
        }
    }

    pub fn memory(&self) -> PrototypeMemory {
        PrototypeMemory::from_parts(
            self.memory.prototypes.clone(),
            self.memory.mu,
            self.memory.initialized,
        )
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|source| Error::Io {
                path: dir.to_path_buf(),
                source,
            })?;
        }
        let json = serde_json::to_string(self).expect("checkpoint serializes");
        fs::write(path, json).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let text = fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let ckpt: Checkpoint = serde_json::from_str(&text)
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        if ckpt.format != FORMAT_TAG {
            return Err(Error::Checkpoint(format!(
                "unsupported format tag '{}' (expected '{FORMAT_TAG}')",
                ckpt.format
            )));
        }
        Ok(ckpt)
    }

    /// Guards stage-2 training against a mismatched stage-1 model.
    pub fn check_architecture(&self, config: &Config) -> Result<()> {
        if self.config.n_rab != config.n_rab || self.config.enable_rab != config.enable_rab {
            return Err(Error::Checkpoint(format!(
                "checkpoint was trained with n_rab={} enable_rab={}, current config has n_rab={} enable_rab={}",
                self.config.n_rab, self.config.enable_rab, config.n_rab, config.enable_rab
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_preserves_everything() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.json");
        let config = Config::default();
        let net = SnippetNet::new(1, 6, 2, 2);
        let memory = PrototypeMemory::from_parts(
            Array2::from_shape_fn((2, 6), |(r, c)| (r * 6 + c) as f64 * 0.1),
            0.999,
            true,
        );
        let mut ckpt = Checkpoint::new(config, net.clone(), &memory);
        ckpt.instance_heads = Some(InstanceHeads::new(2, 6));
        ckpt.save(&path).unwrap();

        let loaded = Checkpoint::load(&path).unwrap();
        assert_eq!(loaded.format, FORMAT_TAG);
        assert_eq!(loaded.snippet_net, net);
        assert_eq!(loaded.memory().prototypes(), memory.prototypes());
        assert_eq!(loaded.instance_heads, ckpt.instance_heads);
    }

    #[test]
    fn wrong_format_tag_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.json");
        let config = Config::default();
        let net = SnippetNet::new(1, 4, 2, 1);
        let memory = PrototypeMemory::from_parts(Array2::zeros((2, 4)), 0.9, true);
        let mut ckpt = Checkpoint::new(config, net, &memory);
        ckpt.format = "other".to_string();
        let json = serde_json::to_string(&ckpt).unwrap();
        std::fs::write(&path, json).unwrap();
        assert!(Checkpoint::load(&path).is_err());
    }

    #[test]
    fn architecture_guard_rejects_mismatch() {
        let config = Config::default();
        let net = SnippetNet::new(1, 4, 2, 2);
        let memory = PrototypeMemory::from_parts(Array2::zeros((2, 4)), 0.9, true);
        let ckpt = Checkpoint::new(config.clone(), net, &memory);
        let mut other = config;
        other.n_rab = 3;
        assert!(ckpt.check_architecture(&other).is_err());
    }
}

