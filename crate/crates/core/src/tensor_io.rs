//! Directory-of-tensors persistence: `manifest.json` plus one raw
//! little-endian `f64` file per tensor, row-major.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;

pub const DTYPE: &str = "f64le";

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: [usize; 2],
    pub file: String,
    pub byte_offset: u64,
    pub byte_len: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub dtype: String,
    /// Free-form payload: the model config for checkpoints, dataset shape for datasets.
    pub meta: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
}

pub fn write_dir(
    dir: &Path,
    format: &str,
    meta: serde_json::Value,
    tensors: &[(String, &Matrix)],
) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut entries = Vec::with_capacity(tensors.len());
    for (name, m) in tensors {
        let file = format!("{name}.bin");
        let mut bytes = Vec::with_capacity(m.data().len() * 8);
        for v in m.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        fs::write(dir.join(&file), &bytes)?;
        entries.push(TensorEntry {
            name: name.clone(),
            shape: [m.rows(), m.cols()],
            file,
            byte_offset: 0,
            byte_len: bytes.len() as u64,
        });
    }
    let manifest = Manifest {
        format: format.to_string(),
        version: 1,
        dtype: DTYPE.to_string(),
        meta,
        tensors: entries,
    };
    fs::write(
        dir.join("manifest.json"),
        serde_json::to_string_pretty(&manifest)?,
    )?;
    Ok(())
}

pub fn read_manifest(dir: &Path, format: &str) -> Result<Manifest> {
    let text = fs::read_to_string(dir.join("manifest.json"))?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    if manifest.format != format {
        return Err(Error::Manifest(format!(
            "expected format {format:?}, found {:?}",
            manifest.format
        )));
    }
    if manifest.dtype != DTYPE {
        return Err(Error::Manifest(format!(
            "unsupported dtype {:?}",
            manifest.dtype
        )));
    }
    Ok(manifest)
}

pub fn read_tensor(dir: &Path, entry: &TensorEntry) -> Result<Matrix> {
    let bytes = fs::read(dir.join(&entry.file))?;
    let [rows, cols] = entry.shape;
    let need = (rows * cols * 8) as u64;
    let start = entry.byte_offset as usize;
    if entry.byte_len != need || (bytes.len() as u64) < entry.byte_offset + need {
        return Err(Error::Manifest(format!(
            "tensor {} needs {need} bytes at offset {}, file has {}",
            entry.name,
            entry.byte_offset,
            bytes.len()
        )));
    }
    let data = bytes[start..start + need as usize]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    Matrix::from_vec_finite(rows, cols, data)
}
