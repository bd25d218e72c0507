//! Checkpoints: a flat little-endian `f64` file of named blocks and a JSON
//! manifest listing each block's name, shape and offset.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::merge::MergeStrategy;
use super::network::{Network, NetworkConfig};
use super::params::ParamStore;
use super::trainer::Trainer;
use crate::error::{Error, Result};
use crate::io::{self, FORMAT_VERSION};
use crate::registry::TaskRegistry;

pub const CHECKPOINT_DATA: &str = "checkpoint.bin";
pub const CHECKPOINT_MANIFEST: &str = "checkpoint.json";
const EMA_PREFIX: &str = "ema.";
const LOG_VAR_BLOCK: &str = "loss.log_var";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlockEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset in `f64` values from the start of the data file.
    pub offset: usize,
    pub len: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointManifest {
    pub format_version: u32,
    pub seed: u64,
    pub step: u64,
    pub epoch: usize,
    pub strategy: MergeStrategy,
    pub config_hash: String,
    /// Full run configuration as given.
    pub config: serde_json::Value,
    pub network: NetworkConfig,
    pub input_channels: usize,
    pub registry: TaskRegistry,
    pub data: String,
    /// SHA-256 of the data file.
    pub data_hash: String,
    pub blocks: Vec<BlockEntry>,
}

/// A checkpoint read back from disk.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub manifest: CheckpointManifest,
    pub net: Network,
    pub ema: ParamStore,
    pub log_var: Option<Vec<f64>>,
}

impl Checkpoint {
    /// Network carrying the averaged weights instead of the raw ones.
    pub fn ema_network(&self) -> Network {
        let mut net = self.net.clone();
        net.params = self.ema.clone();
        net
    }
}

/// Writes `checkpoint.bin` and `checkpoint.json` into `dir`.
pub fn save_checkpoint(
    dir: &Path,
    trainer: &Trainer,
    seed: u64,
    config: serde_json::Value,
    config_hash: String,
) -> Result<PathBuf> {
    let mut data: Vec<u8> = Vec::new();
    let mut blocks = Vec::new();
    let mut offset = 0;
    let mut push = |name: String, shape: Vec<usize>, values: &[f64]| {
        for v in values {
            data.extend_from_slice(&v.to_le_bytes());
        }
        blocks.push(BlockEntry {
            name,
            shape,
            offset,
            len: values.len(),
        });
        offset += values.len();
    };
    for b in &trainer.net.params.blocks {
        push(b.name.clone(), b.shape.clone(), &b.data);
    }
    for b in &trainer.ema.blocks {
        push(format!("{EMA_PREFIX}{}", b.name), b.shape.clone(), &b.data);
    }
    if let Some(s) = &trainer.weights.log_var {
        push(LOG_VAR_BLOCK.to_string(), vec![s.len()], s);
    }
    let data_path = dir.join(CHECKPOINT_DATA);
    io::write_bytes(&data_path, &data)?;
    let manifest = CheckpointManifest {
        format_version: FORMAT_VERSION,
        seed,
        step: trainer.step,
        epoch: trainer.epoch,
        strategy: trainer.config.strategy,
        config_hash,
        config,
        network: trainer.net.config.clone(),
        input_channels: trainer.net.input_channels,
        registry: trainer.registry.clone(),
        data: CHECKPOINT_DATA.to_string(),
        data_hash: io::sha256_hex(&data),
        blocks,
    };
    let path = dir.join(CHECKPOINT_MANIFEST);
    io::write_json(&path, &manifest)?;
    Ok(path)
}

/// Reads a checkpoint from its directory or manifest path.
pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let manifest_path = if path.is_dir() {
        path.join(CHECKPOINT_MANIFEST)
    } else {
        path.to_path_buf()
    };
    let manifest: CheckpointManifest = io::read_json(&manifest_path)?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::format(&manifest_path, "unsupported checkpoint format_version"));
    }
    let data_path = manifest_path
        .parent()
        .map_or_else(|| PathBuf::from(&manifest.data), |d| d.join(&manifest.data));
    let bytes = io::read_bytes(&data_path)?;
    if io::sha256_hex(&bytes) != manifest.data_hash {
        return Err(Error::format(&data_path, "data hash does not match the manifest"));
    }
    let values: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|b| f64::from_le_bytes(b.try_into().expect("8-byte chunk")))
        .collect();
    let block = |entry: &BlockEntry| -> Result<Vec<f64>> {
        values
            .get(entry.offset..entry.offset + entry.len)
            .map(<[f64]>::to_vec)
            .ok_or_else(|| Error::format(&data_path, format!("block '{}' out of range", entry.name)))
    };
    let mut net = Network::new(
        manifest.network.clone(),
        manifest.input_channels,
        &manifest.registry,
        manifest.seed,
    )?;
    let mut ema = net.params.clone();
    let mut log_var = None;
    let mut seen = vec![false; net.params.blocks.len()];
    for entry in &manifest.blocks {
        let (store, name) = match entry.name.strip_prefix(EMA_PREFIX) {
            Some(rest) => (&mut ema, rest),
            None if entry.name == LOG_VAR_BLOCK => {
                log_var = Some(block(entry)?);
                continue;
            }
            None => (&mut net.params, entry.name.as_str()),
        };
        let i = store
            .index_of(name)
            .ok_or_else(|| Error::format(&manifest_path, format!("unknown block '{}'", entry.name)))?;
        if store.blocks[i].shape != entry.shape {
            return Err(Error::format(
                &manifest_path,
                format!("block '{}' has the wrong shape", entry.name),
            ));
        }
        store.blocks[i].data = block(entry)?;
        if !entry.name.starts_with(EMA_PREFIX) {
            seen[i] = true;
        }
    }
    if seen.iter().any(|s| !s) {
        return Err(Error::format(&manifest_path, "checkpoint lacks some parameter blocks"));
    }
    Ok(Checkpoint {
        manifest,
        net,
        ema,
        log_var,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::network::LayerSpec;
    use crate::engine::trainer::{LossConfig, TrainConfig};

    #[test]
    fn roundtrip() {
        let registry = TaskRegistry::canonical(3).unwrap();
        let cfg = NetworkConfig {
            backbone: vec![LayerSpec {
                channels: 3,
                stride: 2,
                kernel: 3,
            }],
            ..Default::default()
        };
        let mut net = Network::new(cfg, 2, &registry, 9).unwrap();
        net.params.blocks[0].data[0] = 0.125;
        let mut t = Trainer::new(net, registry.clone(), TrainConfig::default(), LossConfig::default(), 9).unwrap();
        t.weights.log_var.as_mut().unwrap()[1] = -0.5;
        t.ema.blocks[1].data[0] = 3.0;
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(dir.path(), &t, 9, serde_json::json!({"k": 1}), "abc".into()).unwrap();
        let c = load_checkpoint(dir.path()).unwrap();
        assert_eq!(c.net.params, t.net.params);
        assert_eq!(c.ema, t.ema);
        assert_eq!(c.log_var, t.weights.log_var);
        assert_eq!(c.manifest.registry, registry);
        assert_eq!(c.ema_network().params, t.ema);

        std::fs::write(dir.path().join(CHECKPOINT_DATA), [0u8; 16]).unwrap();
        assert!(load_checkpoint(dir.path()).is_err());
    }
}
