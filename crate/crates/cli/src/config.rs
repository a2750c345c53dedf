use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Context;
use funcreg_core::augment::AugmentPolicy;
use funcreg_core::data::ShiftBenchmark;
use funcreg_core::model::ModelConfig;
use funcreg_core::regularizers::RegularizerConfig;
use funcreg_core::training::TrainConfig;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::exit::Failure;

/// One run's full configuration. Every section is optional and defaults to
/// the library defaults.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub data: ShiftBenchmark,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub regularizer: RegularizerConfig,
    pub augment: AugmentPolicy,
}

impl RunConfig {
    pub fn validate(&self) -> anyhow::Result<()> {
        self.data.validate()?;
        self.train.validate()?;
        for w in self.regularizer.validate()? {
            log::warn!("{w}");
        }
        self.augment.validate()?;
        Ok(())
    }
}

/// Reads a JSON config. Unreadable files and schema errors are usage
/// failures; serde names the offending key.
pub fn read_json<T: DeserializeOwned>(path: &Path, what: &str) -> anyhow::Result<T> {
    let text = fs::read_to_string(path)
        .map_err(|e| Failure::Usage(format!("cannot read {what} {}: {e}", path.display())))?;
    serde_json::from_str(&text)
        .map_err(|e| Failure::Usage(format!("{what} {}: {e}", path.display())).into())
}

/// SHA-256 of the canonical JSON form (object keys sorted, no whitespace).
pub fn config_hash<T: Serialize>(value: &T) -> String {
    let canonical = serde_json::to_value(value).expect("config serializes");
    let text = serde_json::to_string(&canonical).expect("value serializes");
    hex::encode(Sha256::digest(text.as_bytes()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub command: String,
    pub config_hash: String,
    pub method: Option<String>,
    pub seed: Option<u64>,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    pub wall_clock_secs: f64,
}

pub const RUN_MANIFEST: &str = "run_manifest.json";

impl RunManifest {
    pub fn new(command: &str, config_hash: String) -> Self {
        RunManifest {
            run_id: format!("{command}-{}", &config_hash[..12]),
            command: command.to_string(),
            config_hash,
            method: None,
            seed: None,
            inputs: Vec::new(),
            outputs: Vec::new(),
            wall_clock_secs: 0.0,
        }
    }

    pub fn write(&self, dir: &Path) -> anyhow::Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        let path = dir.join(RUN_MANIFEST);
        fs::write(&path, text + "\n").with_context(|| format!("writing {}", path.display()))
    }

    pub fn read(dir: &Path) -> anyhow::Result<Self> {
        let path = dir.join(RUN_MANIFEST);
        let text = fs::read_to_string(&path)
            .map_err(|e| Failure::Data(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text)
            .map_err(|e| Failure::Data(format!("{}: {e}", path.display())).into())
    }
}
