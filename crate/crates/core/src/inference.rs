//! Sliding-window segmentation of whole volumes.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{write_raw, Grid, LabelMap, Volume};
use crate::error::{Error, Result};
use crate::losses::{average_prediction, uncertainty};
use crate::model::{Mode, Network};
use crate::tensor::{voxel_count, Dims3, Real, Tensor};

/// Which prediction is averaged into the output probabilities.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Head {
    /// The full-resolution head `p_0`.
    #[default]
    Finest,
    /// The scale average `p_c`.
    Average,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InferenceConfig {
    pub patch: Dims3,
    /// Defaults to half the patch.
    pub stride: Option<Dims3>,
    pub head: Head,
    /// Windows per forward pass.
    pub batch: usize,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self {
            patch: [32, 32, 32],
            stride: None,
            head: Head::Finest,
            batch: 4,
        }
    }
}

impl InferenceConfig {
    pub fn stride(&self) -> Dims3 {
        self.stride
            .unwrap_or_else(|| std::array::from_fn(|a| (self.patch[a] / 2).max(1)))
    }
}

/// Window origins along one axis: a regular grid, with the last window
/// moved inward so it ends at the border.
pub fn window_starts(len: usize, patch: usize, stride: usize) -> Result<Vec<usize>> {
    if patch == 0 || patch > len {
        return Err(Error::Input(format!("window of {patch} does not fit an axis of {len}")));
    }
    if stride == 0 || stride > patch {
        return Err(Error::Input(format!("stride must be in [1, {patch}], got {stride}")));
    }
    let mut starts: Vec<usize> = (0..).map(|k| k * stride).take_while(|&s| s + patch < len).collect();
    starts.push(len - patch);
    Ok(starts)
}

/// Number of windows covering each voxel.
pub fn coverage(dims: Dims3, patch: Dims3, stride: Dims3) -> Result<Vec<u32>> {
    let starts: Vec<Vec<usize>> = (0..3)
        .map(|a| window_starts(dims[a], patch[a], stride[a]))
        .collect::<Result<_>>()?;
    let mut count = vec![0u32; voxel_count(dims)];
    for &z0 in &starts[0] {
        for &y0 in &starts[1] {
            for &x0 in &starts[2] {
                for z in z0..z0 + patch[0] {
                    for y in y0..y0 + patch[1] {
                        let row = (z * dims[1] + y) * dims[2];
                        count[row + x0..row + x0 + patch[2]].iter_mut().for_each(|c| *c += 1);
                    }
                }
            }
        }
    }
    Ok(count)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SegmentationResult {
    pub num_classes: usize,
    /// `C×D×H×W`, averaged over windows.
    pub prob: Vec<f32>,
    /// Per-voxel argmax of `prob`; ties go to the lower class.
    pub labels: LabelMap,
    /// Window-averaged KL divergence of the finest head from the scale average.
    pub uncertainty: Volume,
}

impl SegmentationResult {
    pub fn dims(&self) -> Dims3 {
        self.labels.dims()
    }

    /// Probabilities of class `c`.
    pub fn class_prob(&self, c: usize) -> &[f32] {
        let v = voxel_count(self.dims());
        &self.prob[c * v..(c + 1) * v]
    }

    /// Writes `<id>_prob`, `<id>_labels` and `<id>_uncertainty` raw containers into `dir`.
    pub fn save(&self, dir: &Path, id: &str) -> Result<[PathBuf; 3]> {
        let paths = [
            dir.join(format!("{id}_prob.raw")),
            dir.join(format!("{id}_labels.raw")),
            dir.join(format!("{id}_uncertainty.raw")),
        ];
        let spacing = self.labels.spacing();
        write_raw(&paths[0], self.num_classes, self.dims(), spacing, &self.prob)?;
        self.labels.save(&paths[1])?;
        self.uncertainty.save(&paths[2])?;
        Ok(paths)
    }
}

/// Segments a normalized volume with overlapping windows in eval mode.
///
/// Axes shorter than the patch are zero-padded when the network would pad
/// them to at least the patch size anyway; otherwise the patch is rejected.
pub fn sliding_window_predict<T: Real>(
    net: &Network<T>,
    volume: &Volume,
    cfg: &InferenceConfig,
) -> Result<SegmentationResult> {
    let dims = volume.dims();
    let patch = cfg.patch;
    let stride = cfg.stride();
    if cfg.batch == 0 {
        return Err(Error::Config("inference batch must be positive".into()));
    }
    let mult = net.config().size_multiple();
    let mut work_dims = dims;
    for a in 0..3 {
        let padded = dims[a].div_ceil(mult[a]) * mult[a];
        if patch[a] == 0 || patch[a] > padded {
            return Err(Error::Input(format!(
                "patch {patch:?} larger than the padded volume {dims:?}"
            )));
        }
        work_dims[a] = dims[a].max(patch[a]);
    }
    let before: Dims3 = std::array::from_fn(|a| (work_dims[a] - dims[a]) / 2);
    let work = if work_dims == dims {
        volume.clone()
    } else {
        let t = Tensor::from_vec([1, 1, dims[0], dims[1], dims[2]], volume.data().to_vec())?;
        let after: Dims3 = std::array::from_fn(|a| work_dims[a] - dims[a] - before[a]);
        Grid::new(work_dims, volume.spacing(), t.pad(before, after).into_vec())?
    };

    let starts: Vec<Vec<usize>> = (0..3)
        .map(|a| window_starts(work_dims[a], patch[a], stride[a]))
        .collect::<Result<_>>()?;
    let mut origins = Vec::new();
    for &z in &starts[0] {
        for &y in &starts[1] {
            for &x in &starts[2] {
                origins.push([z, y, x]);
            }
        }
    }

    let c = net.config().num_classes;
    let v = voxel_count(work_dims);
    let pv = voxel_count(patch);
    let mut prob_acc = vec![0.0f64; c * v];
    let mut unc_acc = vec![0.0f64; v];
    let mut count = vec![0u32; v];
    for chunk in origins.chunks(cfg.batch) {
        let mut data = Vec::with_capacity(chunk.len() * pv);
        for &o in chunk {
            data.extend(work.crop(o, patch)?.data().iter().map(|&x| T::from_f64(x as f64)));
        }
        let x = Tensor::from_vec([chunk.len(), 1, patch[0], patch[1], patch[2]], data)?;
        let pyr = net.forward(&x, &Mode::Eval)?;
        let probs = match cfg.head {
            Head::Finest => pyr.probs[0].clone(),
            Head::Average => average_prediction(&pyr.probs)?,
        };
        let unc = uncertainty(&pyr.probs)?.divergence.swap_remove(0);
        for (i, &[z0, y0, x0]) in chunk.iter().enumerate() {
            let p = probs.sample(i);
            let u = unc.sample(i);
            for z in 0..patch[0] {
                for y in 0..patch[1] {
                    let row = ((z0 + z) * work_dims[1] + y0 + y) * work_dims[2] + x0;
                    let src = (z * patch[1] + y) * patch[2];
                    for x in 0..patch[2] {
                        count[row + x] += 1;
                        unc_acc[row + x] += u[src + x].as_f64();
                        for j in 0..c {
                            prob_acc[j * v + row + x] += p[j * pv + src + x].as_f64();
                        }
                    }
                }
            }
        }
    }

    // back to the caller's grid
    let vo = voxel_count(dims);
    let mut prob = vec![0.0f32; c * vo];
    let mut unc = vec![0.0f32; vo];
    let mut labels = vec![0u8; vo];
    for z in 0..dims[0] {
        for y in 0..dims[1] {
            for x in 0..dims[2] {
                let o = (z * dims[1] + y) * dims[2] + x;
                let i = ((z + before[0]) * work_dims[1] + y + before[1]) * work_dims[2] + x + before[2];
                let n = count[i] as f64;
                debug_assert!(n > 0.0, "voxel not covered");
                unc[o] = (unc_acc[i] / n) as f32;
                let mut best = 0;
                for j in 0..c {
                    let pj = prob_acc[j * v + i] / n;
                    prob[j * vo + o] = pj as f32;
                    if pj > prob_acc[best * v + i] / n {
                        best = j;
                    }
                }
                labels[o] = best as u8;
            }
        }
    }
    Ok(SegmentationResult {
        num_classes: c,
        prob,
        labels: Grid::new(dims, volume.spacing(), labels)?,
        uncertainty: Grid::new(dims, volume.spacing(), unc)?,
    })
}
