//! Synthetic data, on-disk containers, manifests, augmentation and batch sampling.

mod augment;
mod grid;
mod manifest;
mod sampler;
mod synth;

pub use augment::{augment, AugmentParams};
pub use grid::{read_raw, sidecar_path, write_raw, Element, Grid, LabelMap, RawHeader, Volume};
pub use manifest::{
    generate_synthetic_dataset, labeled_count, DatasetManifest, GenerateOptions, ManifestItem, Split, SplitName,
    MANIFEST_FILE,
};
pub use sampler::{sample_batch, Batch, BatchSampler, Case, SamplerConfig};
pub use synth::{gaussian_smooth, generate_case, MIN_EXTENT};
