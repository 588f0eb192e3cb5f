use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::augment::AugmentParams;
use super::grid::{LabelMap, Volume};
use super::manifest::{DatasetManifest, SplitName};
use crate::error::{Error, Result};
use crate::model::mix_seed;
use crate::tensor::{voxel_count, Dims3, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplerConfig {
    pub patch: Dims3,
    pub labeled_per_batch: usize,
    pub unlabeled_per_batch: usize,
    pub augment: bool,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            patch: [32, 32, 32],
            labeled_per_batch: 2,
            unlabeled_per_batch: 2,
            augment: true,
            seed: 0,
        }
    }
}

/// A normalized training case held in memory.
#[derive(Clone, Debug)]
pub struct Case {
    pub id: String,
    pub volume: Volume,
    pub labels: Option<LabelMap>,
}

impl Case {
    pub fn load(manifest: &DatasetManifest, id: &str, with_labels: bool) -> Result<Self> {
        let volume = manifest.load_volume(id)?.normalize()?;
        let labels = if with_labels {
            let y = manifest.load_labels(id)?;
            if y.dims() != volume.dims() {
                return Err(Error::Dataset(format!(
                    "case {id}: label grid does not match the volume"
                )));
            }
            Some(y)
        } else {
            None
        };
        Ok(Self {
            id: id.to_string(),
            volume,
            labels,
        })
    }
}

/// Labeled patches first, then unlabeled ones.
#[derive(Clone, Debug)]
pub struct Batch {
    pub labeled: Vec<(Volume, LabelMap)>,
    pub unlabeled: Vec<Volume>,
    pub labeled_ids: Vec<String>,
    pub unlabeled_ids: Vec<String>,
    pub params: Vec<AugmentParams>,
    /// Stable per-sample key, independent of the batch composition.
    pub keys: Vec<u64>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.labeled.len() + self.unlabeled.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `N×1×D×H×W` stack of every patch.
    pub fn images(&self) -> Tensor<f32> {
        let dims = self
            .labeled
            .first()
            .map(|(v, _)| v.dims())
            .or_else(|| self.unlabeled.first().map(Volume::dims))
            .unwrap_or([0; 3]);
        let mut data = Vec::with_capacity(self.len() * voxel_count(dims));
        for v in self.labeled.iter().map(|(v, _)| v).chain(&self.unlabeled) {
            data.extend_from_slice(v.data());
        }
        Tensor::from_vec([self.len(), 1, dims[0], dims[1], dims[2]], data).expect("uniform patch shapes")
    }

    pub fn label_slices(&self) -> Vec<&[u8]> {
        self.labeled.iter().map(|(_, y)| y.data()).collect()
    }
}

const LABELED_STREAM: u64 = 1;
const UNLABELED_STREAM: u64 = 2;

/// Deterministic mixed-batch sampler.
///
/// Each stream walks through its cases in epochs, reshuffled per epoch. The
/// `i`-th draw of a stream depends only on `(seed, stream, i)`, so a batch is
/// a pure function of the step index.
#[derive(Clone, Debug)]
pub struct BatchSampler {
    labeled: Vec<Case>,
    unlabeled: Vec<Case>,
    cfg: SamplerConfig,
}

impl BatchSampler {
    /// Loads and normalizes every training case the configuration will use.
    pub fn new(manifest: &DatasetManifest, cfg: SamplerConfig) -> Result<Self> {
        let load = |split: SplitName, labels: bool, wanted: usize| -> Result<Vec<Case>> {
            if wanted == 0 {
                return Ok(Vec::new());
            }
            manifest
                .ids(split)
                .iter()
                .map(|id| Case::load(manifest, id, labels))
                .collect()
        };
        let labeled = load(SplitName::TrainLabeled, true, cfg.labeled_per_batch)?;
        let unlabeled = load(SplitName::TrainUnlabeled, false, cfg.unlabeled_per_batch)?;
        Self::from_cases(labeled, unlabeled, cfg)
    }

    pub fn from_cases(labeled: Vec<Case>, unlabeled: Vec<Case>, cfg: SamplerConfig) -> Result<Self> {
        if cfg.labeled_per_batch + cfg.unlabeled_per_batch == 0 {
            return Err(Error::Config("batch must hold at least one patch".into()));
        }
        if cfg.labeled_per_batch > 0 && labeled.is_empty() {
            return Err(Error::Dataset("labeled training split is empty".into()));
        }
        if cfg.unlabeled_per_batch > 0 && unlabeled.is_empty() {
            return Err(Error::Dataset("unlabeled training split is empty".into()));
        }
        if labeled.iter().any(|c| c.labels.is_none()) {
            return Err(Error::Dataset("labeled case without labels".into()));
        }
        for case in labeled.iter().chain(&unlabeled) {
            let dims = case.volume.dims();
            if (0..3).any(|a| cfg.patch[a] > dims[a]) {
                return Err(Error::Input(format!(
                    "patch {:?} larger than case {} of shape {dims:?}",
                    cfg.patch, case.id
                )));
            }
        }
        Ok(Self {
            labeled,
            unlabeled,
            cfg,
        })
    }

    pub fn config(&self) -> &SamplerConfig {
        &self.cfg
    }

    pub fn sample(&self, step: u64) -> Result<Batch> {
        let mut batch = Batch {
            labeled: Vec::new(),
            unlabeled: Vec::new(),
            labeled_ids: Vec::new(),
            unlabeled_ids: Vec::new(),
            params: Vec::new(),
            keys: Vec::new(),
        };
        for j in 0..self.cfg.labeled_per_batch {
            let draw = step * self.cfg.labeled_per_batch as u64 + j as u64;
            let (case, params, key) = self.pick(&self.labeled, LABELED_STREAM, draw)?;
            let labels = case.labels.as_ref().expect("checked on construction");
            batch.labeled.push((params.apply(&case.volume)?, params.apply(labels)?));
            batch.labeled_ids.push(case.id.clone());
            batch.params.push(params);
            batch.keys.push(key);
        }
        for j in 0..self.cfg.unlabeled_per_batch {
            let draw = step * self.cfg.unlabeled_per_batch as u64 + j as u64;
            let (case, params, key) = self.pick(&self.unlabeled, UNLABELED_STREAM, draw)?;
            batch.unlabeled.push(params.apply(&case.volume)?);
            batch.unlabeled_ids.push(case.id.clone());
            batch.params.push(params);
            batch.keys.push(key);
        }
        Ok(batch)
    }

    fn pick<'a>(&self, cases: &'a [Case], stream: u64, draw: u64) -> Result<(&'a Case, AugmentParams, u64)> {
        let n = cases.len() as u64;
        let stream_seed = mix_seed(self.cfg.seed, stream);
        let (epoch, pos) = (draw / n, draw % n);
        let mut order: Vec<usize> = (0..cases.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix_seed(stream_seed, epoch)));
        let case = &cases[order[pos as usize]];
        let key = mix_seed(stream_seed ^ 0x5EED, draw);
        let dims = case.volume.dims();
        let params = if self.cfg.augment {
            AugmentParams::draw(dims, self.cfg.patch, &mut ChaCha8Rng::seed_from_u64(key))?
        } else {
            // centre crop keeps the no-augmentation path deterministic too
            let offset = std::array::from_fn(|a| (dims[a] - self.cfg.patch[a]) / 2);
            AugmentParams::crop_only(offset, self.cfg.patch)
        };
        Ok((case, params, key))
    }
}

/// One-off batch straight from a manifest.
pub fn sample_batch(manifest: &DatasetManifest, cfg: &SamplerConfig, step: u64) -> Result<Batch> {
    BatchSampler::new(manifest, cfg.clone())?.sample(step)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::grid::Grid;

    fn case(id: &str, seed: u64, labeled: bool) -> Case {
        let dims = [6, 6, 6];
        let n = voxel_count(dims);
        let data = (0..n).map(|i| ((i as u64 * 31 + seed * 7) % 17) as f32).collect();
        Case {
            id: id.into(),
            volume: Grid::new(dims, [1.0; 3], data).unwrap(),
            labels: labeled.then(|| Grid::new(dims, [1.0; 3], (0..n).map(|i| (i % 3) as u8).collect()).unwrap()),
        }
    }

    fn sampler(seed: u64) -> BatchSampler {
        let labeled = (0..3).map(|i| case(&format!("l{i}"), i, true)).collect();
        let unlabeled = (0..5).map(|i| case(&format!("u{i}"), 10 + i, false)).collect();
        let cfg = SamplerConfig {
            patch: [4, 4, 4],
            seed,
            ..SamplerConfig::default()
        };
        BatchSampler::from_cases(labeled, unlabeled, cfg).unwrap()
    }

    #[test]
    fn default_batch_is_two_plus_two() {
        let b = sampler(0).sample(0).unwrap();
        assert_eq!(b.labeled.len(), 2);
        assert_eq!(b.unlabeled.len(), 2);
        assert_eq!(b.images().shape(), [4, 1, 4, 4, 4]);
        assert_eq!(b.keys.len(), 4);
    }

    #[test]
    fn same_seed_same_batches() {
        let (a, b) = (sampler(9), sampler(9));
        for step in 0..10 {
            let (x, y) = (a.sample(step).unwrap(), b.sample(step).unwrap());
            assert_eq!(x.labeled_ids, y.labeled_ids);
            assert_eq!(x.unlabeled_ids, y.unlabeled_ids);
            assert_eq!(x.params, y.params);
        }
        let other = sampler(10);
        assert!((0..10).any(|s| other.sample(s).unwrap().params != a.sample(s).unwrap().params));
    }

    #[test]
    fn each_epoch_visits_every_case_once() {
        let s = sampler(4);
        // 3 labeled cases, 2 per batch: steps 0..3 cover two full epochs
        let ids: Vec<String> = (0..3).flat_map(|t| s.sample(t).unwrap().labeled_ids).collect();
        for epoch in ids.chunks(3) {
            let mut e = epoch.to_vec();
            e.sort();
            assert_eq!(e, vec!["l0", "l1", "l2"]);
        }
    }

    #[test]
    fn empty_split_is_an_error() {
        let cfg = SamplerConfig {
            patch: [4, 4, 4],
            ..SamplerConfig::default()
        };
        assert!(BatchSampler::from_cases(vec![case("l", 0, true)], vec![], cfg.clone()).is_err());
        let labeled_only = SamplerConfig {
            unlabeled_per_batch: 0,
            ..cfg
        };
        assert!(BatchSampler::from_cases(vec![case("l", 0, true)], vec![], labeled_only).is_ok());
    }
}
