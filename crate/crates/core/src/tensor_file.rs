//! `NVCM` tensor files.
//!
//! Layout, all integers little-endian:
//!
//! | bytes      | content                                  |
//! |------------|------------------------------------------|
//! | 0..4       | magic `NVCM`                             |
//! | 4..8       | dtype tag, `u32`; `1` = float32 LE       |
//! | 8..12      | rank `r`, `u32`                          |
//! | 12..12+4r  | dims, `u32` each, outermost first        |
//! | rest       | row-major payload                        |

use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::{Array2, ArrayD, IxDyn};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"NVCM";
pub const DTYPE_F32_LE: u32 = 1;

pub fn encode(tensor: &ArrayD<f32>) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + 4 * tensor.ndim() + 4 * tensor.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&DTYPE_F32_LE.to_le_bytes());
    out.extend_from_slice(&(tensor.ndim() as u32).to_le_bytes());
    for &d in tensor.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in tensor.iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<ArrayD<f32>> {
    let bad = |reason: &str| Error::TensorFormat {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    };
    let word = |at: usize| -> Result<u32> {
        bytes
            .get(at..at + 4)
            .map(|b| u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .ok_or_else(|| bad("truncated header"))
    };
    if bytes.get(0..4) != Some(MAGIC.as_slice()) {
        return Err(bad("missing NVCM magic"));
    }
    if word(4)? != DTYPE_F32_LE {
        return Err(bad("unsupported dtype tag"));
    }
    let rank = word(8)? as usize;
    let dims = (0..rank)
        .map(|i| word(12 + 4 * i).map(|d| d as usize))
        .collect::<Result<Vec<_>>>()?;
    let start = 12 + 4 * rank;
    let count: usize = dims.iter().product();
    let payload = &bytes[start.min(bytes.len())..];
    if payload.len() != 4 * count {
        return Err(bad(&format!(
            "payload holds {} bytes, dims need {}",
            payload.len(),
            4 * count
        )));
    }
    let values = payload
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    ArrayD::from_shape_vec(IxDyn(&dims), values).map_err(|e| bad(&e.to_string()))
}

/// Writes through a temporary sibling and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn write(path: &Path, tensor: &ArrayD<f32>) -> Result<()> {
    write_atomic(path, &encode(tensor))
}

pub fn read(path: &Path) -> Result<ArrayD<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}

pub fn write_matrix(path: &Path, m: &Array2<f32>) -> Result<()> {
    write(path, &m.clone().into_dyn())
}

pub fn read_matrix(path: &Path) -> Result<Array2<f32>> {
    read(path)?
        .into_dimensionality()
        .map_err(|_| Error::TensorFormat {
            path: path.to_path_buf(),
            reason: "expected a rank-2 tensor".into(),
        })
}
