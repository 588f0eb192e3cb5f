//! Parameter archive: a small binary file plus a JSON sidecar.
//!
//! Layout (little-endian): magic `URPCCKPT`, `u32` version, `u8` element
//! width, `u32` tensor count, then per tensor a `u32`-prefixed UTF-8 name,
//! `u32` rank, `u64` extents and the values.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Network, NetworkConfig};
use crate::tensor::Real;

pub const MAGIC: &[u8; 8] = b"URPCCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format_version: u32,
    pub network: NetworkConfig,
    /// Number of optimizer steps taken.
    pub step: usize,
    pub num_parameters: usize,
    /// Validation mean foreground DSC when the checkpoint was written.
    #[serde(default)]
    pub val_dsc: Option<f64>,
}

pub fn sidecar(path: &Path) -> PathBuf {
    path.with_extension("json")
}

/// Writes the archive and sidecar through temporary files, so an interrupted
/// save never clobbers the previous checkpoint.
pub fn save_checkpoint<T: Real>(
    net: &Network<T>,
    step: usize,
    val_dsc: Option<f64>,
    path: &Path,
) -> Result<CheckpointMeta> {
    let width = std::mem::size_of::<T>();
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.push(width as u8);
    let params = net.params();
    buf.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for p in &params {
        buf.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
        buf.extend_from_slice(p.name.as_bytes());
        buf.extend_from_slice(&(p.shape.len() as u32).to_le_bytes());
        for &d in &p.shape {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in &p.value {
            if width == 4 {
                buf.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
            } else {
                buf.extend_from_slice(&v.as_f64().to_le_bytes());
            }
        }
    }
    let meta = CheckpointMeta {
        format_version: FORMAT_VERSION,
        network: net.config().clone(),
        step,
        num_parameters: net.num_parameters(),
        val_dsc,
    };
    let json = serde_json::to_string_pretty(&meta).map_err(|e| Error::json(path, e))?;
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let side = sidecar(path);
    for (target, bytes) in [(path.to_path_buf(), buf), (side, json.into_bytes())] {
        let tmp = target.with_extension("tmp");
        fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, &target).map_err(|e| Error::io(&target, e))?;
    }
    Ok(meta)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Checkpoint("archive truncated".into()))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn load_meta(path: &Path) -> Result<CheckpointMeta> {
    let side = sidecar(path);
    let text = fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(&side, e))
}

/// Rebuilds the network from the sidecar config and fills in the stored values.
pub fn load_checkpoint<T: Real>(path: &Path) -> Result<(Network<T>, CheckpointMeta)> {
    let meta = load_meta(path)?;
    if meta.format_version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported format version {}",
            meta.format_version
        )));
    }
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut r = Reader { bytes: &bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::Checkpoint(format!(
            "{} is not a checkpoint archive",
            path.display()
        )));
    }
    if r.u32()? != FORMAT_VERSION {
        return Err(Error::Checkpoint("archive and sidecar versions differ".into()));
    }
    let width = r.take(1)?[0] as usize;
    if width != 4 && width != 8 {
        return Err(Error::Checkpoint(format!("unsupported element width {width}")));
    }
    let mut net = Network::<T>::new(meta.network.clone())?;
    let count = r.u32()? as usize;
    let mut params = net.params_mut();
    if count != params.len() {
        return Err(Error::Checkpoint(format!(
            "archive holds {count} tensors, network has {}",
            params.len()
        )));
    }
    for p in params.iter_mut() {
        let name_len = r.u32()? as usize;
        let name =
            std::str::from_utf8(r.take(name_len)?).map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
        let rank = r.u32()? as usize;
        let shape = (0..rank)
            .map(|_| r.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        if name != p.name || shape != p.shape {
            return Err(Error::Checkpoint(format!(
                "expected {} {:?}, found {name} {shape:?}",
                p.name, p.shape
            )));
        }
        let raw = r.take(p.len() * width)?;
        for (v, chunk) in p.value.iter_mut().zip(raw.chunks_exact(width)) {
            *v = if width == 4 {
                T::from_f64(f32::from_le_bytes(chunk.try_into().expect("4 bytes")) as f64)
            } else {
                T::from_f64(f64::from_le_bytes(chunk.try_into().expect("8 bytes")))
            };
        }
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint("trailing bytes after the last tensor".into()));
    }
    Ok((net, meta))
}
