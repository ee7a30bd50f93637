//! Binary matrix files: row-major little-endian `f64` payload plus a JSON
//! sidecar `{"n": rows, "k": cols}` stored next to it as `<file>.json`.

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MatrixShape {
    pub n: usize,
    pub k: usize,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

pub fn encode(m: &DMatrix<f64>) -> Vec<u8> {
    let mut bytes = Vec::with_capacity(m.len() * 8);
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            bytes.extend_from_slice(&m[(i, j)].to_le_bytes());
        }
    }
    bytes
}

pub fn decode(bytes: &[u8], shape: MatrixShape, path: &Path) -> Result<DMatrix<f64>> {
    let expected = shape.n * shape.k * 8;
    if bytes.len() != expected {
        return Err(Error::Length {
            path: path.to_path_buf(),
            expected,
            found: bytes.len(),
        });
    }
    let values: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect();
    Ok(DMatrix::from_row_slice(shape.n, shape.k, &values))
}

/// Writes the payload and its sidecar. Returns the SHA-256 of the payload.
pub fn write_matrix(path: &Path, m: &DMatrix<f64>) -> Result<String> {
    let bytes = encode(m);
    fs::write(path, &bytes).map_err(|e| Error::io(path, e))?;
    let shape = MatrixShape {
        n: m.nrows(),
        k: m.ncols(),
    };
    let side = sidecar_path(path);
    fs::write(&side, serde_json::to_vec(&shape)?).map_err(|e| Error::io(&side, e))?;
    Ok(sha256_hex(&bytes))
}

pub fn read_matrix(path: &Path) -> Result<DMatrix<f64>> {
    let side = sidecar_path(path);
    let shape: MatrixShape =
        serde_json::from_slice(&fs::read(&side).map_err(|e| Error::io(&side, e))?)?;
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, shape, path)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}
