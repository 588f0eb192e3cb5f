use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::grid::{Element, Grid, LabelMap, Volume};
use crate::error::{Error, Result};
use crate::tensor::Dims3;

/// One draw of the spatial augmentation: crop, then flips, then quarter turns
/// about the D axis. Every step only permutes voxels, so labels stay exact.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AugmentParams {
    pub offset: Dims3,
    pub size: Dims3,
    pub flips: [bool; 3],
    pub quarter_turns: u8,
}

impl AugmentParams {
    /// The no-op draw for a grid of `dims`.
    pub fn identity(dims: Dims3) -> Self {
        Self {
            offset: [0; 3],
            size: dims,
            flips: [false; 3],
            quarter_turns: 0,
        }
    }

    /// Crop only, no flips or turns.
    pub fn crop_only(offset: Dims3, size: Dims3) -> Self {
        Self {
            offset,
            size,
            flips: [false; 3],
            quarter_turns: 0,
        }
    }

    pub fn draw<R: Rng>(dims: Dims3, patch: Dims3, rng: &mut R) -> Result<Self> {
        check_fits(dims, patch)?;
        let offset = std::array::from_fn(|a| rng.gen_range(0..=dims[a] - patch[a]));
        let flips = std::array::from_fn(|_| rng.gen_bool(0.5));
        // odd turns swap H and W, which would change non-square patch shapes
        let quarter_turns = if patch[1] == patch[2] {
            rng.gen_range(0..4)
        } else {
            2 * rng.gen_range(0..2)
        };
        Ok(Self {
            offset,
            size: patch,
            flips,
            quarter_turns,
        })
    }

    pub fn apply<T: Element>(&self, grid: &Grid<T>) -> Result<Grid<T>> {
        let mut out = grid.crop(self.offset, self.size)?;
        for (axis, &flip) in self.flips.iter().enumerate() {
            if flip {
                out = out.flip(axis);
            }
        }
        Ok(out.rot90(self.quarter_turns))
    }
}

fn check_fits(dims: Dims3, patch: Dims3) -> Result<()> {
    if (0..3).any(|a| patch[a] == 0 || patch[a] > dims[a]) {
        return Err(Error::Input(format!("patch {patch:?} larger than volume {dims:?}")));
    }
    Ok(())
}

/// Applies the same random crop/flip/rotation to a volume and its labels.
pub fn augment(v: &Volume, y: &LabelMap, patch: Dims3, seed: u64) -> Result<(Volume, LabelMap)> {
    if v.dims() != y.dims() {
        return Err(Error::shape(v.dims(), y.dims()));
    }
    let params = AugmentParams::draw(v.dims(), patch, &mut ChaCha8Rng::seed_from_u64(seed))?;
    Ok((params.apply(v)?, params.apply(y)?))
}
