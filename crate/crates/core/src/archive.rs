//! Named-tensor archive.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! [u64 manifest_len][manifest JSON, manifest_len bytes][tensor data]
//! ```
//!
//! The manifest is `{"tensors": {name: {"dtype": "f32", "shape": [..],
//! "offset": n}}, "metadata": {..}}`. Offsets are relative to the start of
//! the data section; tensors are row-major f32. Tensor names are kept in a
//! `BTreeMap` so the byte layout of a written archive is a function of its
//! contents only.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};

const DTYPE_F32: &str = "f32";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub dtype: String,
    pub shape: Vec<usize>,
    pub offset: u64,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
struct Manifest {
    tensors: BTreeMap<String, TensorEntry>,
    #[serde(default)]
    metadata: serde_json::Map<String, Value>,
}

/// In-memory archive: named f32 tensors plus a free-form JSON metadata block.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TensorArchive {
    tensors: BTreeMap<String, (Vec<usize>, Vec<f32>)>,
    pub metadata: serde_json::Map<String, Value>,
}

impl TensorArchive {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, shape: Vec<usize>, data: Vec<f32>) -> Result<()> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Archive(format!(
                "tensor {name}: shape {shape:?} needs {expected} values, got {}",
                data.len()
            )));
        }
        self.tensors.insert(name.to_owned(), (shape, data));
        Ok(())
    }

    pub fn insert_matrix(&mut self, name: &str, m: &Array2<f32>) -> Result<()> {
        let shape = vec![m.nrows(), m.ncols()];
        self.insert(name, shape, m.iter().copied().collect())
    }

    pub fn insert_vector(&mut self, name: &str, v: &Array1<f32>) -> Result<()> {
        self.insert(name, vec![v.len()], v.to_vec())
    }

    pub fn set_meta(&mut self, key: &str, value: impl Serialize) -> Result<()> {
        self.metadata
            .insert(key.to_owned(), serde_json::to_value(value)?);
        Ok(())
    }

    pub fn meta<T: serde::de::DeserializeOwned>(&self, key: &str) -> Result<T> {
        let v = self
            .metadata
            .get(key)
            .ok_or_else(|| Error::Archive(format!("missing metadata field {key:?}")))?;
        serde_json::from_value(v.clone())
            .map_err(|e| Error::Archive(format!("metadata field {key:?}: {e}")))
    }

    pub fn meta_opt<T: serde::de::DeserializeOwned>(&self, key: &str) -> Result<Option<T>> {
        match self.metadata.get(key) {
            None | Some(Value::Null) => Ok(None),
            Some(_) => self.meta(key).map(Some),
        }
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn get(&self, name: &str) -> Result<(&[usize], &[f32])> {
        self.tensors
            .get(name)
            .map(|(s, d)| (s.as_slice(), d.as_slice()))
            .ok_or_else(|| Error::Archive(format!("missing tensor {name:?}")))
    }

    pub fn matrix(&self, name: &str) -> Result<Array2<f32>> {
        let (shape, data) = self.get(name)?;
        if shape.len() != 2 {
            return Err(Error::Archive(format!(
                "tensor {name:?} has rank {}, expected 2",
                shape.len()
            )));
        }
        Array2::from_shape_vec((shape[0], shape[1]), data.to_vec())
            .map_err(|e| Error::Archive(e.to_string()))
    }

    pub fn vector(&self, name: &str) -> Result<Array1<f32>> {
        let (shape, data) = self.get(name)?;
        if shape.len() != 1 {
            return Err(Error::Archive(format!(
                "tensor {name:?} has rank {}, expected 1",
                shape.len()
            )));
        }
        Ok(Array1::from(data.to_vec()))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut manifest = Manifest {
            tensors: BTreeMap::new(),
            metadata: self.metadata.clone(),
        };
        let mut offset = 0u64;
        for (name, (shape, data)) in &self.tensors {
            manifest.tensors.insert(
                name.clone(),
                TensorEntry {
                    dtype: DTYPE_F32.to_owned(),
                    shape: shape.clone(),
                    offset,
                },
            );
            offset += 4 * data.len() as u64;
        }
        let header = serde_json::to_vec(&manifest)?;
        let mut out = Vec::with_capacity(8 + header.len() + offset as usize);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for (_, data) in self.tensors.values() {
            for v in data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 {
            return Err(Error::Archive("truncated header".into()));
        }
        let header_len = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
        let data_start = 8usize
            .checked_add(header_len)
            .filter(|&end| end <= bytes.len())
            .ok_or_else(|| Error::Archive("manifest length exceeds file size".into()))?;
        let manifest: Manifest = serde_json::from_slice(&bytes[8..data_start])?;
        let data = &bytes[data_start..];
        let mut archive = TensorArchive {
            tensors: BTreeMap::new(),
            metadata: manifest.metadata,
        };
        for (name, entry) in manifest.tensors {
            if entry.dtype != DTYPE_F32 {
                return Err(Error::Archive(format!(
                    "tensor {name:?}: unsupported dtype {:?}",
                    entry.dtype
                )));
            }
            let n: usize = entry.shape.iter().product();
            let start = entry.offset as usize;
            let end = start + 4 * n;
            if end > data.len() {
                return Err(Error::Archive(format!("tensor {name:?} runs past end of file")));
            }
            let values = data[start..end]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            archive.tensors.insert(name, (entry.shape, values));
        }
        Ok(archive)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_atomic(path.as_ref(), &self.to_bytes()?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

/// Write `bytes` to a temp file in the destination directory, then rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    fs::create_dir_all(dir)?;
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::Validation(format!("not a file path: {}", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp{}", file_name.to_string_lossy(), std::process::id()));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_preserves_bits() {
        let mut a = TensorArchive::new();
        a.insert("w", vec![2, 3], vec![1.0, -0.0, f32::MIN_POSITIVE, 3.5, 1e-30, 7.0])
            .unwrap();
        a.insert("b", vec![1], vec![0.25]).unwrap();
        a.set_meta("layer_id", 3).unwrap();
        let b = TensorArchive::from_bytes(&a.to_bytes().unwrap()).unwrap();
        assert_eq!(a, b);
        let (_, w) = b.get("w").unwrap();
        assert_eq!(w[1].to_bits(), (-0.0f32).to_bits());
        assert_eq!(b.meta::<i64>("layer_id").unwrap(), 3);
    }

    #[test]
    fn layout_is_little_endian_row_major() {
        let mut a = TensorArchive::new();
        a.insert("m", vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let bytes = a.to_bytes().unwrap();
        let hlen = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
        let manifest: Value = serde_json::from_slice(&bytes[8..8 + hlen]).unwrap();
        assert_eq!(manifest["tensors"]["m"]["dtype"], "f32");
        assert_eq!(manifest["tensors"]["m"]["offset"], 0);
        let data = &bytes[8 + hlen..];
        assert_eq!(&data[4..8], &2.0f32.to_le_bytes());
        assert_eq!(data.len(), 16);
    }

    #[test]
    fn rejects_shape_mismatch_and_bad_dtype() {
        let mut a = TensorArchive::new();
        assert!(a.insert("x", vec![2, 2], vec![1.0]).is_err());

        a.insert("x", vec![1], vec![1.0]).unwrap();
        let bytes = a.to_bytes().unwrap();
        let mut patched = bytes.clone();
        let at = patched.windows(5).position(|w| w == b"\"f32\"").unwrap();
        patched[at + 1..at + 4].copy_from_slice(b"f16");
        assert!(TensorArchive::from_bytes(&patched).is_err());
        assert!(TensorArchive::from_bytes(&bytes[..bytes.len() - 1]).is_err());
    }
}
