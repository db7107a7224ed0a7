//! Tensor store: `manifest.json` (name, shape, dtype, byte offset) plus one
//! little-endian blob, `weights.bin`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::tape::Precision;
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::io::{read_json, write_atomic, write_json};

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const BLOB_FILE: &str = "weights.bin";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub offset: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub version: u32,
    pub tensors: Vec<TensorEntry>,
}

fn dtype_width(dtype: &str) -> Result<usize> {
    match dtype {
        "f32" => Ok(4),
        "f64" => Ok(8),
        other => Err(Error::Checkpoint(format!("unsupported dtype `{other}`"))),
    }
}

/// Serializes tensors in the given order into (manifest, blob).
pub fn encode_tensors<'a>(
    tensors: impl IntoIterator<Item = (&'a str, &'a Tensor)>,
    precision: Precision,
) -> (Manifest, Vec<u8>) {
    let mut blob = Vec::new();
    let mut entries = Vec::new();
    for (name, t) in tensors {
        entries.push(TensorEntry {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            dtype: precision.dtype().to_string(),
            offset: blob.len() as u64,
        });
        match precision {
            Precision::F32 => t.data().iter().for_each(|&v| blob.extend_from_slice(&(v as f32).to_le_bytes())),
            Precision::F64 => t.data().iter().for_each(|&v| blob.extend_from_slice(&v.to_le_bytes())),
        }
    }
    (
        Manifest {
            version: FORMAT_VERSION,
            tensors: entries,
        },
        blob,
    )
}

pub fn decode_tensors(manifest: &Manifest, blob: &[u8]) -> Result<Vec<(String, Tensor)>> {
    if manifest.version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "manifest version {} is not supported (expected {FORMAT_VERSION})",
            manifest.version
        )));
    }
    let mut out = Vec::with_capacity(manifest.tensors.len());
    for e in &manifest.tensors {
        let width = dtype_width(&e.dtype)?;
        let numel: usize = e.shape.iter().product();
        let start = e.offset as usize;
        let end = start + numel * width;
        let bytes = blob
            .get(start..end)
            .ok_or_else(|| Error::Checkpoint(format!("tensor `{}` overruns the blob", e.name)))?;
        let data = match width {
            4 => bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect(),
            _ => bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        };
        out.push((e.name.clone(), Tensor::new(e.shape.clone(), data)?));
    }
    Ok(out)
}

pub fn save_tensors<'a>(
    dir: &Path,
    tensors: impl IntoIterator<Item = (&'a str, &'a Tensor)>,
    precision: Precision,
) -> Result<()> {
    let (manifest, blob) = encode_tensors(tensors, precision);
    write_atomic(&dir.join(BLOB_FILE), &blob)?;
    write_json(&dir.join(MANIFEST_FILE), &manifest)
}

pub fn load_tensors(dir: &Path) -> Result<Vec<(String, Tensor)>> {
    let manifest: Manifest = read_json(&dir.join(MANIFEST_FILE))?;
    let blob_path = dir.join(BLOB_FILE);
    let blob = fs::read(&blob_path).map_err(|e| Error::io(&blob_path, e))?;
    decode_tensors(&manifest, &blob)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn f64_round_trip_is_exact(data in proptest::collection::vec(-1e6f64..1e6, 1..40)) {
            let t = Tensor::vector(data);
            let (m, blob) = encode_tensors([("w", &t)], Precision::F64);
            let back = decode_tensors(&m, &blob).unwrap();
            prop_assert_eq!(&back[0].1, &t);
        }
    }

    #[test]
    fn offsets_are_cumulative_and_version_is_checked() {
        let a = Tensor::zeros(vec![2, 3]);
        let b = Tensor::zeros(vec![4]);
        let (mut m, blob) = encode_tensors([("a", &a), ("b", &b)], Precision::F32);
        assert_eq!(m.tensors[1].offset, 24);
        assert_eq!(blob.len(), 40);
        m.version = 99;
        assert!(decode_tensors(&m, &blob).is_err());
    }
}
