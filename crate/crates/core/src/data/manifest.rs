use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::grid::{LabelMap, Volume};
use super::synth::generate_case;
use crate::error::{Error, Result};
use crate::model::mix_seed;
use crate::tensor::Dims3;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestItem {
    pub id: String,
    /// Relative to the manifest directory.
    pub volume_path: PathBuf,
    #[serde(default)]
    pub label_path: Option<PathBuf>,
    /// Hex SHA-256 of the volume bytes followed by the label bytes.
    pub checksum: String,
}

/// Case ids per role. Training ids are kept in a fixed order and the labeled
/// subset is always a prefix of it, so smaller labeled sets nest in larger ones.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train_labeled: Vec<String>,
    pub train_unlabeled: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitName {
    TrainLabeled,
    TrainUnlabeled,
    Val,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub items: Vec<ManifestItem>,
    pub split: Split,
    pub generator_seed: u64,
    /// Directory the item paths are relative to; not serialized.
    #[serde(skip)]
    pub root: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenerateOptions {
    pub num_cases: usize,
    pub dims: Dims3,
    pub seed: u64,
    pub num_val: usize,
    pub num_test: usize,
    pub labeled_fraction: f64,
}

impl Default for GenerateOptions {
    fn default() -> Self {
        Self {
            num_cases: 32,
            dims: [64, 64, 64],
            seed: 0,
            num_val: 4,
            num_test: 8,
            labeled_fraction: 0.1,
        }
    }
}

/// Number of labeled cases for a fraction of `train` cases (at least one).
pub fn labeled_count(train: usize, fraction: f64) -> Result<usize> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Config(format!(
            "labeled fraction must be in (0, 1], got {fraction}"
        )));
    }
    Ok(((train as f64 * fraction).round() as usize).clamp(1, train.max(1)))
}

/// Generates `num_cases` phantoms under `out_dir` and writes the manifest.
pub fn generate_synthetic_dataset(opts: &GenerateOptions, out_dir: &Path) -> Result<DatasetManifest> {
    if opts.num_cases < 4 {
        return Err(Error::Config(format!("need at least 4 cases, got {}", opts.num_cases)));
    }
    if opts.num_val + opts.num_test + 2 > opts.num_cases {
        return Err(Error::Config(format!(
            "{} cases cannot hold {} val + {} test and two training cases",
            opts.num_cases, opts.num_val, opts.num_test
        )));
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut items = Vec::with_capacity(opts.num_cases);
    for i in 0..opts.num_cases {
        let id = format!("case_{i:03}");
        let (volume, labels) = generate_case(opts.dims, mix_seed(opts.seed, i as u64))?;
        let volume_path = PathBuf::from("images").join(format!("{id}.raw"));
        let label_path = PathBuf::from("labels").join(format!("{id}.raw"));
        volume.save(&out_dir.join(&volume_path))?;
        labels.save(&out_dir.join(&label_path))?;
        let checksum = checksum(out_dir, &volume_path, Some(&label_path))?;
        items.push(ManifestItem {
            id,
            volume_path,
            label_path: Some(label_path),
            checksum,
        });
    }

    let mut order: Vec<String> = items.iter().map(|it| it.id.clone()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix_seed(opts.seed, u64::MAX)));
    let test = order.drain(..opts.num_test).collect();
    let val = order.drain(..opts.num_val).collect();
    let manifest = DatasetManifest {
        items,
        split: Split {
            train_labeled: order,
            train_unlabeled: Vec::new(),
            val,
            test,
        },
        generator_seed: opts.seed,
        root: out_dir.to_path_buf(),
    }
    .with_labeled_fraction(opts.labeled_fraction)?;
    manifest.save(&out_dir.join(MANIFEST_FILE))?;
    Ok(manifest)
}

fn checksum(root: &Path, volume: &Path, label: Option<&Path>) -> Result<String> {
    let mut hasher = Sha256::new();
    for rel in std::iter::once(volume).chain(label) {
        let path = root.join(rel);
        hasher.update(fs::read(&path).map_err(|e| Error::io(&path, e))?);
    }
    Ok(hex::encode(hasher.finalize()))
}

impl DatasetManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut m: Self = serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
        m.root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        m.validate()?;
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.validate()?;
        let json = serde_json::to_string_pretty(self).map_err(|e| Error::json(path, e))?;
        fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn validate(&self) -> Result<()> {
        let mut ids = HashSet::new();
        for item in &self.items {
            if !ids.insert(item.id.as_str()) {
                return Err(Error::Dataset(format!("duplicate id {}", item.id)));
            }
        }
        let mut seen = HashSet::new();
        for (name, list) in self.split_lists() {
            for id in list {
                if !ids.contains(id.as_str()) {
                    return Err(Error::Dataset(format!("{name:?} lists unknown id {id}")));
                }
                if !seen.insert(id.as_str()) {
                    return Err(Error::Dataset(format!("{id} appears in more than one split")));
                }
            }
        }
        for id in &self.split.train_labeled {
            if self.item(id)?.label_path.is_none() {
                return Err(Error::Dataset(format!("labeled case {id} has no label_path")));
            }
        }
        Ok(())
    }

    fn split_lists(&self) -> [(SplitName, &Vec<String>); 4] {
        [
            (SplitName::TrainLabeled, &self.split.train_labeled),
            (SplitName::TrainUnlabeled, &self.split.train_unlabeled),
            (SplitName::Val, &self.split.val),
            (SplitName::Test, &self.split.test),
        ]
    }

    pub fn ids(&self, split: SplitName) -> &[String] {
        match split {
            SplitName::TrainLabeled => &self.split.train_labeled,
            SplitName::TrainUnlabeled => &self.split.train_unlabeled,
            SplitName::Val => &self.split.val,
            SplitName::Test => &self.split.test,
        }
    }

    pub fn item(&self, id: &str) -> Result<&ManifestItem> {
        self.items
            .iter()
            .find(|it| it.id == id)
            .ok_or_else(|| Error::Dataset(format!("unknown case id {id}")))
    }

    /// Re-split the training cases so that `fraction` of them are labeled.
    pub fn with_labeled_fraction(&self, fraction: f64) -> Result<Self> {
        let train: Vec<String> = self
            .split
            .train_labeled
            .iter()
            .chain(&self.split.train_unlabeled)
            .cloned()
            .collect();
        if train.is_empty() {
            return Err(Error::Dataset("manifest has no training cases".into()));
        }
        let k = labeled_count(train.len(), fraction)?;
        let mut out = self.clone();
        out.split.train_labeled = train[..k].to_vec();
        out.split.train_unlabeled = train[k..].to_vec();
        out.validate()?;
        Ok(out)
    }

    pub fn load_volume(&self, id: &str) -> Result<Volume> {
        Volume::load(&self.root.join(&self.item(id)?.volume_path))
    }

    pub fn load_labels(&self, id: &str) -> Result<LabelMap> {
        let item = self.item(id)?;
        let rel = item
            .label_path
            .as_ref()
            .ok_or_else(|| Error::Dataset(format!("case {id} has no labels")))?;
        LabelMap::load(&self.root.join(rel))
    }

    /// Recomputes every checksum and reports the ids that no longer match.
    pub fn verify_checksums(&self) -> Result<Vec<String>> {
        let mut bad = Vec::new();
        for item in &self.items {
            if checksum(&self.root, &item.volume_path, item.label_path.as_deref())? != item.checksum {
                bad.push(item.id.clone());
            }
        }
        Ok(bad)
    }
}
