//! Run configuration: one TOML document with a section per component, and
//! the run manifest every command writes next to its outputs.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::decoder::DecodeParams;
use crate::engine::{LossConfig, NetworkConfig, StudyConfig, StudySetup, TrainConfig};
use crate::error::{Error, Result};
use crate::io;
use crate::metrics::EvalOptions;
use crate::registry::TaskRegistry;
use crate::synth::GenConfig;

pub const CONFIG_VERSION: u32 = 1;
pub const RUN_MANIFEST: &str = "run.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub version: u32,
    /// Seeds network initialisation, batch order, merge sampling and
    /// evaluation resampling.
    pub seed: u64,
    pub output: PathBuf,
    /// Scenes written by `generate`.
    pub scenes: usize,
    /// Canonical attribute set to train; `None` trains every rendered attribute.
    pub attributes: Option<usize>,
    pub gen: GenConfig,
    pub network: NetworkConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
    pub decode: DecodeParams,
    pub eval: EvalOptions,
    pub study: StudyConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            version: CONFIG_VERSION,
            seed: 0,
            output: PathBuf::from("out"),
            scenes: 64,
            attributes: None,
            gen: GenConfig::default(),
            network: NetworkConfig::default(),
            loss: LossConfig::default(),
            train: TrainConfig::default(),
            decode: DecodeParams::default(),
            eval: EvalOptions::default(),
            study: StudyConfig::default(),
        }
    }
}

impl RunConfig {
    /// Parses and validates a TOML document. Unknown keys and other parse
    /// failures are [`Error::Config`].
    pub fn from_toml(text: &str) -> Result<Self> {
        let config: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        if config.version != CONFIG_VERSION {
            return Err(Error::Config(format!(
                "unsupported config version {} (expected {CONFIG_VERSION})",
                config.version
            )));
        }
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.gen.validate()?;
        self.network.validate()?;
        self.loss.validate()?;
        self.train.validate()?;
        self.decode.validate()?;
        self.eval.validate()?;
        self.study.validate()?;
        if let Some(a) = self.attributes {
            TaskRegistry::canonical(a)?;
        }
        Ok(())
    }

    /// Overrides the run seed and the generator seed together.
    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.gen.seed = seed;
    }

    pub fn hash(&self) -> Result<String> {
        io::config_hash(self)
    }

    /// Registry to train on given the registry a dataset renders.
    pub fn training_registry(&self, data: &TaskRegistry) -> Result<TaskRegistry> {
        let registry = match self.attributes {
            Some(a) => TaskRegistry::canonical(a)?,
            None => data.clone(),
        };
        if !registry.is_subset_of(data) {
            return Err(Error::invalid(format!(
                "the dataset does not annotate every field of the {}-attribute registry",
                registry.attribute_count()
            )));
        }
        Ok(registry)
    }

    pub fn study_setup(&self) -> StudySetup {
        StudySetup {
            gen: self.gen.clone(),
            network: self.network.clone(),
            train: self.train.clone(),
            loss: self.loss.clone(),
            study: self.study.clone(),
            seed: self.seed,
        }
    }
}

/// Written by every command into its output directory; together with the
/// inputs it names, enough to reproduce every output.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub format_version: u32,
    pub command: String,
    pub seed: u64,
    pub config: RunConfig,
    pub config_hash: String,
    /// Input paths as given on the command line.
    pub inputs: BTreeMap<String, String>,
    /// Files written, relative to the output directory.
    pub outputs: Vec<String>,
}

impl RunManifest {
    pub fn new(command: &str, config: &RunConfig) -> Result<Self> {
        Ok(RunManifest {
            format_version: io::FORMAT_VERSION,
            command: command.to_string(),
            seed: config.seed,
            config: config.clone(),
            config_hash: config.hash()?,
            inputs: BTreeMap::new(),
            outputs: Vec::new(),
        })
    }

    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        let path = dir.join(RUN_MANIFEST);
        io::write_json(&path, self)?;
        Ok(path)
    }
}
