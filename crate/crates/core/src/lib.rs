//! Semi-supervised volumetric segmentation with uncertainty rectified pyramid consistency.
//!
//! A UNet-style network emits softmax predictions at several decoder scales.
//! Labeled patches train every scale with Dice plus cross-entropy; unlabeled
//! patches are pulled towards the scale average, with each voxel weighted by
//! how far its scale prediction diverges from that average.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod inference;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
