use std::fmt::Debug;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{voxel_count, Dims3};

/// Scalar types that can be stored in the raw container.
pub trait Element: Copy + Default + PartialEq + Debug + Send + Sync + 'static {
    const DTYPE: &'static str;
    const BYTES: usize;
    fn put_le(self, out: &mut Vec<u8>);
    fn get_le(bytes: &[u8]) -> Self;
}

impl Element for f32 {
    const DTYPE: &'static str = "float32";
    const BYTES: usize = 4;

    fn put_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn get_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("4 bytes"))
    }
}

impl Element for u8 {
    const DTYPE: &'static str = "uint8";
    const BYTES: usize = 1;

    fn put_le(self, out: &mut Vec<u8>) {
        out.push(self);
    }

    fn get_le(bytes: &[u8]) -> Self {
        bytes[0]
    }
}

/// A dense `D×H×W` grid with physical voxel spacing.
#[derive(Clone, Debug, PartialEq)]
pub struct Grid<T> {
    dims: Dims3,
    spacing: [f64; 3],
    data: Vec<T>,
}

/// Scalar intensity volume.
pub type Volume = Grid<f32>;
/// Integer class labels aligned to a [`Volume`].
pub type LabelMap = Grid<u8>;

impl<T: Element> Grid<T> {
    pub fn new(dims: Dims3, spacing: [f64; 3], data: Vec<T>) -> Result<Self> {
        if dims.contains(&0) {
            return Err(Error::Input(format!("grid dimensions must be positive, got {dims:?}")));
        }
        if !spacing.iter().all(|s| s.is_finite() && *s > 0.0) {
            return Err(Error::Input(format!("spacing must be positive, got {spacing:?}")));
        }
        if data.len() != voxel_count(dims) {
            return Err(Error::shape(voxel_count(dims), data.len()));
        }
        Ok(Self { dims, spacing, data })
    }

    pub fn filled(dims: Dims3, value: T) -> Self {
        Self {
            dims,
            spacing: [1.0; 3],
            data: vec![value; voxel_count(dims)],
        }
    }

    pub fn dims(&self) -> Dims3 {
        self.dims
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn index(&self, z: usize, y: usize, x: usize) -> usize {
        (z * self.dims[1] + y) * self.dims[2] + x
    }

    pub fn get(&self, z: usize, y: usize, x: usize) -> T {
        self.data[self.index(z, y, x)]
    }

    /// Sub-grid of `size` starting at `offset`.
    pub fn crop(&self, offset: Dims3, size: Dims3) -> Result<Self> {
        for a in 0..3 {
            if size[a] == 0 || offset[a] + size[a] > self.dims[a] {
                return Err(Error::Input(format!(
                    "crop {size:?} at {offset:?} does not fit in {:?}",
                    self.dims
                )));
            }
        }
        let mut data = Vec::with_capacity(voxel_count(size));
        for z in 0..size[0] {
            for y in 0..size[1] {
                let start = self.index(offset[0] + z, offset[1] + y, offset[2]);
                data.extend_from_slice(&self.data[start..start + size[2]]);
            }
        }
        Ok(Self {
            dims: size,
            spacing: self.spacing,
            data,
        })
    }

    /// Mirror along `axis` (0 = D, 1 = H, 2 = W).
    pub fn flip(&self, axis: usize) -> Self {
        let [d, h, w] = self.dims;
        let mut out = self.clone();
        for z in 0..d {
            for y in 0..h {
                for x in 0..w {
                    let (sz, sy, sx) = match axis {
                        0 => (d - 1 - z, y, x),
                        1 => (z, h - 1 - y, x),
                        _ => (z, y, w - 1 - x),
                    };
                    out.data[(z * h + y) * w + x] = self.get(sz, sy, sx);
                }
            }
        }
        out
    }

    /// Rotate by `quarter_turns` × 90° in the H–W plane (about the D axis).
    pub fn rot90(&self, quarter_turns: u8) -> Self {
        let mut out = self.clone();
        for _ in 0..quarter_turns % 4 {
            out = out.rot90_once();
        }
        out
    }

    fn rot90_once(&self) -> Self {
        let [d, h, w] = self.dims;
        // out[z][y'][x'] = in[z][x'][w - 1 - y'], shape D×W×H
        let mut data = Vec::with_capacity(self.data.len());
        for z in 0..d {
            for yo in 0..w {
                for xo in 0..h {
                    data.push(self.get(z, xo, w - 1 - yo));
                }
            }
        }
        let [sd, sh, sw] = self.spacing;
        Self {
            dims: [d, w, h],
            spacing: [sd, sw, sh],
            data,
        }
    }

    /// Writes `<stem>.raw` (little-endian) and the `<stem>.json` sidecar.
    pub fn save(&self, raw_path: &Path) -> Result<()> {
        write_raw(raw_path, 1, self.dims, self.spacing, &self.data)
    }

    pub fn load(raw_path: &Path) -> Result<Self> {
        let (header, data) = read_raw::<T>(raw_path)?;
        if header.channels != 1 {
            return Err(Error::Dataset(format!(
                "{}: expected a single-channel grid, found {} channels",
                raw_path.display(),
                header.channels
            )));
        }
        Self::new(header.shape, header.spacing, data)
    }
}

impl Volume {
    /// Rescale to zero mean and unit variance.
    pub fn normalize(&self) -> Result<Self> {
        if !self.data.iter().all(|v| v.is_finite()) {
            return Err(Error::Input("volume contains non-finite values".into()));
        }
        let n = self.data.len() as f64;
        let mean = self.data.iter().map(|&v| v as f64).sum::<f64>() / n;
        let var = self.data.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
        let std = var.sqrt();
        if std <= f64::EPSILON * mean.abs().max(1.0) {
            return Err(Error::Input("cannot normalize a constant volume".into()));
        }
        let data = self.data.iter().map(|&v| ((v as f64 - mean) / std) as f32).collect();
        Ok(Self {
            dims: self.dims,
            spacing: self.spacing,
            data,
        })
    }
}

/// JSON sidecar describing a raw container.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RawHeader {
    pub shape: Dims3,
    pub spacing: [f64; 3],
    pub dtype: String,
    #[serde(default = "one")]
    pub channels: usize,
}

fn one() -> usize {
    1
}

pub fn sidecar_path(raw_path: &Path) -> PathBuf {
    raw_path.with_extension("json")
}

/// Writes `channels × D×H×W` values, channel-major, plus the sidecar.
pub fn write_raw<T: Element>(
    raw_path: &Path,
    channels: usize,
    dims: Dims3,
    spacing: [f64; 3],
    data: &[T],
) -> Result<()> {
    if data.len() != channels * voxel_count(dims) {
        return Err(Error::shape(channels * voxel_count(dims), data.len()));
    }
    if let Some(dir) = raw_path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut bytes = Vec::with_capacity(data.len() * T::BYTES);
    for &v in data {
        v.put_le(&mut bytes);
    }
    fs::write(raw_path, bytes).map_err(|e| Error::io(raw_path, e))?;
    let header = RawHeader {
        shape: dims,
        spacing,
        dtype: T::DTYPE.to_string(),
        channels,
    };
    let side = sidecar_path(raw_path);
    let json = serde_json::to_string_pretty(&header).map_err(|e| Error::json(&side, e))?;
    fs::write(&side, json).map_err(|e| Error::io(&side, e))
}

pub fn read_raw<T: Element>(raw_path: &Path) -> Result<(RawHeader, Vec<T>)> {
    let side = sidecar_path(raw_path);
    let text = fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
    let header: RawHeader = serde_json::from_str(&text).map_err(|e| Error::json(&side, e))?;
    if header.dtype != T::DTYPE {
        return Err(Error::Dataset(format!(
            "{}: dtype {} where {} was expected",
            raw_path.display(),
            header.dtype,
            T::DTYPE
        )));
    }
    let bytes = fs::read(raw_path).map_err(|e| Error::io(raw_path, e))?;
    let expected = header.channels * voxel_count(header.shape) * T::BYTES;
    if bytes.len() != expected {
        return Err(Error::Dataset(format!(
            "{}: {} bytes, header implies {expected}",
            raw_path.display(),
            bytes.len()
        )));
    }
    let data = bytes.chunks_exact(T::BYTES).map(T::get_le).collect();
    Ok((header, data))
}
