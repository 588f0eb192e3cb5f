//! Experiment configuration, canonical hashing and run directories.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::data::GenerateOptions;
use crate::error::{Error, Result};
use crate::inference::InferenceConfig;
use crate::model::NetworkConfig;
use crate::trainer::TrainConfig;

/// Environment variable naming the directory that holds run directories.
pub const OUTPUT_ROOT_ENV: &str = "URPC_OUTPUT_ROOT";
pub const DEFAULT_OUTPUT_ROOT: &str = "runs";
pub const RECORD_FILE: &str = "experiment.json";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub manifest: Option<PathBuf>,
    /// Re-split the training cases before use.
    pub labeled_fraction: Option<f64>,
}

/// Everything a command needs, in one serializable value.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub network: NetworkConfig,
    pub train: TrainConfig,
    pub inference: InferenceConfig,
    pub data: DataConfig,
    pub generate: GenerateOptions,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::json(path, e))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::json(path, e))?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

/// Serializes with object keys sorted at every level and no whitespace.
pub fn canonical_json(value: &Value) -> String {
    match value {
        Value::Object(map) => {
            let mut keys: Vec<&String> = map.keys().collect();
            keys.sort();
            let body: Vec<String> = keys
                .into_iter()
                .map(|k| format!("{}:{}", Value::String(k.clone()), canonical_json(&map[k])))
                .collect();
            format!("{{{}}}", body.join(","))
        }
        Value::Array(items) => format!("[{}]", items.iter().map(canonical_json).collect::<Vec<_>>().join(",")),
        other => other.to_string(),
    }
}

/// First 16 hex digits of the SHA-256 of the canonical form.
pub fn config_hash<S: Serialize>(value: &S) -> Result<String> {
    let v = serde_json::to_value(value).map_err(|e| Error::Config(format!("unserializable config: {e}")))?;
    let digest = Sha256::digest(canonical_json(&v).as_bytes());
    Ok(hex::encode(digest)[..16].to_string())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub config_hash: String,
    pub code_version: String,
    pub network_seed: u64,
    pub train_seed: u64,
    pub generator_seed: u64,
}

/// What was run, with which settings; enough to rerun it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub command: String,
    pub config: ExperimentConfig,
    /// Command-specific arguments (paths, split names, grids).
    pub args: Value,
    pub provenance: Provenance,
}

impl RunRecord {
    pub fn new(command: &str, config: ExperimentConfig, args: Value) -> Result<Self> {
        let config_hash = config_hash(&(command, &config, &args))?;
        let provenance = Provenance {
            config_hash,
            code_version: env!("CARGO_PKG_VERSION").to_string(),
            network_seed: config.network.seed,
            train_seed: config.train.seed,
            generator_seed: config.generate.seed,
        };
        Ok(Self {
            command: command.into(),
            config,
            args,
            provenance,
        })
    }

    /// `<root>/<command>-<hash>`.
    pub fn run_dir(&self, root: &Path) -> PathBuf {
        root.join(format!("{}-{}", self.command, self.provenance.config_hash))
    }

    /// Creates the run directory and writes the record into it.
    pub fn materialize(&self, root: &Path) -> Result<PathBuf> {
        let dir = self.run_dir(root);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let path = dir.join(RECORD_FILE);
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::json(&path, e))?;
        fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        Ok(dir)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::json(path, e))
    }
}

/// Explicit root, else the environment variable, else `runs`.
pub fn output_root(explicit: Option<&Path>) -> PathBuf {
    explicit
        .map(Path::to_path_buf)
        .or_else(|| std::env::var_os(OUTPUT_ROOT_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUTPUT_ROOT))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hash_ignores_key_order() {
        let a: Value = serde_json::from_str(r#"{"b": 1, "a": {"y": [1, 2], "x": null}}"#).unwrap();
        let b: Value = serde_json::from_str(r#"{"a": {"x": null, "y": [1, 2]}, "b": 1}"#).unwrap();
        assert_eq!(canonical_json(&a), r#"{"a":{"x":null,"y":[1,2]},"b":1}"#);
        assert_eq!(config_hash(&a).unwrap(), config_hash(&b).unwrap());
    }

    #[test]
    fn hash_tracks_every_field() {
        let base = ExperimentConfig::default();
        let mut other = base.clone();
        other.train.seed += 1;
        assert_ne!(config_hash(&base).unwrap(), config_hash(&other).unwrap());
    }

    #[test]
    fn record_round_trips_and_names_its_directory() {
        let dir = tempfile::tempdir().unwrap();
        let rec = RunRecord::new("train", ExperimentConfig::default(), serde_json::json!({"k": 1})).unwrap();
        let run = rec.materialize(dir.path()).unwrap();
        assert!(run.ends_with(format!("train-{}", rec.provenance.config_hash)));
        assert_eq!(RunRecord::load(&run.join(RECORD_FILE)).unwrap(), rec);
    }
}
