//! Named tensor files (safetensors) and JSON manifests.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use safetensors::tensor::TensorView;
use safetensors::SafeTensors;
use serde::de::DeserializeOwned;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nn::{Mat, Scalar};

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;
pub const TENSORS_FILE: &str = "params.safetensors";
pub const MANIFEST_FILE: &str = "manifest.json";

pub fn save_tensors<T: Scalar>(path: &Path, tensors: &[(String, Mat<T>)]) -> Result<()> {
    let bytes: Vec<(String, Vec<u8>, Vec<usize>)> = tensors
        .iter()
        .map(|(name, m)| {
            let mut buf = Vec::with_capacity(m.data.len() * std::mem::size_of::<T>());
            m.data.iter().for_each(|v| v.write_le(&mut buf));
            (name.clone(), buf, vec![m.rows, m.cols])
        })
        .collect();
    let views = bytes
        .iter()
        .map(|(name, buf, shape)| {
            TensorView::new(T::DTYPE, shape.clone(), buf)
                .map(|v| (name.clone(), v))
                .map_err(|e| Error::format(path, e.to_string()))
        })
        .collect::<Result<Vec<_>>>()?;
    let data = safetensors::serialize(views, None).map_err(|e| Error::format(path, e.to_string()))?;
    fs::write(path, data).map_err(|e| Error::io(path, e))
}

pub fn load_tensors<T: Scalar>(path: &Path) -> Result<Vec<(String, Mat<T>)>> {
    let raw = fs::read(path).map_err(|e| Error::io(path, e))?;
    let st = SafeTensors::deserialize(&raw).map_err(|e| Error::format(path, e.to_string()))?;
    let size = std::mem::size_of::<T>();
    let mut out = Vec::new();
    let mut names: Vec<String> = st.names().into_iter().map(|s| s.to_string()).collect();
    names.sort();
    for name in names {
        let view = st.tensor(&name).map_err(|e| Error::format(path, e.to_string()))?;
        if view.dtype() != T::DTYPE {
            return Err(Error::format(
                path,
                format!("tensor {name} has dtype {:?}, expected {}", view.dtype(), T::NAME),
            ));
        }
        let (rows, cols) = match view.shape() {
            [r, c] => (*r, *c),
            other => return Err(Error::format(path, format!("tensor {name} has rank-{} shape", other.len()))),
        };
        let data = view.data().chunks_exact(size).map(T::read_le).collect();
        out.push((name, Mat::from_vec(rows, cols, data)));
    }
    Ok(out)
}

/// Keeps entries whose name starts with `prefix.`, with the prefix removed.
pub fn strip_prefix<T: Clone>(tensors: &[(String, Mat<T>)], prefix: &str) -> Vec<(String, Mat<T>)> {
    let p = format!("{prefix}.");
    tensors
        .iter()
        .filter_map(|(n, m)| n.strip_prefix(&p).map(|s| (s.to_string(), m.clone())))
        .collect()
}

pub fn add_prefix<T>(tensors: Vec<(String, Mat<T>)>, prefix: &str) -> Vec<(String, Mat<T>)> {
    tensors.into_iter().map(|(n, m)| (format!("{prefix}.{n}"), m)).collect()
}

pub fn tensor_map<T>(tensors: &[(String, Mat<T>)]) -> HashMap<&str, &Mat<T>> {
    tensors.iter().map(|(n, m)| (n.as_str(), m)).collect()
}

pub fn write_json<V: Serialize>(path: &Path, value: &V) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::format(path, e.to_string()))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_json<V: DeserializeOwned>(path: &Path) -> Result<V> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
}

/// SHA-256 of the canonical JSON encoding, hex encoded.
pub fn config_hash<V: Serialize>(value: &V) -> String {
    let json = serde_json::to_vec(value).expect("config serialises");
    hex::encode(Sha256::digest(&json))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tensors_round_trip_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.safetensors");
        let a = Mat::from_fn(3, 2, |i, j| (i as f32 - 0.1) * (j as f32 + 0.7));
        let b = Mat::from_vec(1, 1, vec![f32::MIN_POSITIVE]);
        save_tensors(&path, &[("x.a".into(), a.clone()), ("b".into(), b.clone())]).unwrap();
        let back = load_tensors::<f32>(&path).unwrap();
        assert_eq!(back, vec![("b".to_string(), b), ("x.a".to_string(), a.clone())]);
        assert_eq!(strip_prefix(&back, "x"), vec![("a".to_string(), a)]);
        assert!(load_tensors::<f64>(&path).is_err());
    }

    #[test]
    fn hash_is_stable_and_sensitive() {
        #[derive(Serialize)]
        struct C {
            a: u32,
            b: f64,
        }
        assert_eq!(config_hash(&C { a: 1, b: 0.5 }), config_hash(&C { a: 1, b: 0.5 }));
        assert_ne!(config_hash(&C { a: 1, b: 0.5 }), config_hash(&C { a: 2, b: 0.5 }));
    }
}
