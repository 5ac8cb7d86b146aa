//! Raw tensor blobs: row-major little-endian payload plus a JSON sidecar.
//!
//! `<name>.bin` holds the values; `<name>.json` holds
//! `{"name", "shape", "dtype", "sha256"}`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlobMeta {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub sha256: String,
}

impl BlobMeta {
    pub fn of<S: Scalar>(name: &str, t: &Tensor<S>) -> Self {
        Self {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            dtype: S::DTYPE.to_string(),
            sha256: t.checksum(),
        }
    }
}

/// Writes only the payload `<dir>/<name>.bin`, returning its metadata.
pub fn write_payload<S: Scalar>(dir: &Path, name: &str, t: &Tensor<S>) -> Result<BlobMeta> {
    let path = dir.join(format!("{name}.bin"));
    fs::write(&path, t.to_le_bytes()).map_err(|e| Error::io(&path, e))?;
    Ok(BlobMeta::of(name, t))
}

/// Reads `<dir>/<meta.name>.bin` and validates it against `meta`.
pub fn read_payload<S: Scalar>(dir: &Path, meta: &BlobMeta) -> Result<Tensor<S>> {
    let path = dir.join(format!("{}.bin", meta.name));
    if meta.dtype != S::DTYPE {
        return Err(Error::checkpoint(
            &path,
            format!("dtype {} but {} requested", meta.dtype, S::DTYPE),
        ));
    }
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let expected: usize = meta.shape.iter().product::<usize>() * S::BYTES;
    if bytes.len() != expected {
        return Err(Error::checkpoint(
            &path,
            format!("{} bytes, shape {:?} needs {expected}", bytes.len(), meta.shape),
        ));
    }
    let t = Tensor::from_le_bytes(meta.shape.clone(), &bytes)?;
    if t.checksum() != meta.sha256 {
        return Err(Error::checkpoint(&path, "checksum mismatch"));
    }
    Ok(t)
}

/// Writes payload and sidecar.
pub fn write_tensor<S: Scalar>(dir: &Path, name: &str, t: &Tensor<S>) -> Result<BlobMeta> {
    let meta = write_payload(dir, name, t)?;
    let path = dir.join(format!("{name}.json"));
    fs::write(&path, serde_json::to_vec_pretty(&meta)?).map_err(|e| Error::io(&path, e))?;
    Ok(meta)
}

pub fn read_tensor<S: Scalar>(dir: &Path, name: &str) -> Result<Tensor<S>> {
    let path = dir.join(format!("{name}.json"));
    let text = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let meta: BlobMeta = serde_json::from_slice(&text)
        .map_err(|e| Error::checkpoint(&path, format!("bad sidecar: {e}")))?;
    if meta.name != name {
        return Err(Error::checkpoint(&path, format!("sidecar names {}", meta.name)));
    }
    read_payload(dir, &meta)
}
