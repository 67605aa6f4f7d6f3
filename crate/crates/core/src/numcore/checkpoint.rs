//! Binary checkpoint container.
//!
//! Layout: the 8 magic bytes `RADSEQ\0\x01`, a little-endian `u64` header
//! length, a UTF-8 JSON [`CheckpointHeader`], then one raw little-endian
//! value block per tensor in header order.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::params::ParamStore;
use super::tensor::Tensor;
use crate::scalar::Scalar;

const MAGIC: &[u8; 8] = b"RADSEQ\x00\x01";

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("checkpoint i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint header: {0}")]
    Header(#[from] serde_json::Error),
    #[error("not a checkpoint (bad magic bytes)")]
    BadMagic,
    #[error("unsupported dtype {0:?}")]
    Dtype(String),
    #[error("tensor {name}: {msg}")]
    Tensor { name: String, msg: String },
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct CheckpointHeader {
    pub dtype: String,
    pub seed: u64,
    pub vocab_hash: String,
    pub tensors: Vec<TensorEntry>,
    /// Free-form metadata owned by the caller (model config, vocabulary).
    #[serde(default)]
    pub meta: serde_json::Value,
}

/// Lowercase hex SHA-256 of raw bytes.
pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

pub fn write_checkpoint<T: Scalar, W: Write>(
    mut out: W,
    store: &ParamStore<T>,
    seed: u64,
    vocab_hash: &str,
    meta: serde_json::Value,
) -> Result<(), CheckpointError> {
    let header = CheckpointHeader {
        dtype: T::DTYPE.to_string(),
        seed,
        vocab_hash: vocab_hash.to_string(),
        tensors: store
            .iter()
            .map(|(_, name, v)| TensorEntry {
                name: name.to_string(),
                shape: v.shape().to_vec(),
            })
            .collect(),
        meta,
    };
    let json = serde_json::to_vec(&header)?;
    out.write_all(MAGIC)?;
    out.write_all(&(json.len() as u64).to_le_bytes())?;
    out.write_all(&json)?;
    let mut buf = Vec::with_capacity(store.value_count() * T::BYTES);
    for (_, _, v) in store.iter() {
        for &x in v.data() {
            x.write_le(&mut buf);
        }
    }
    out.write_all(&buf)?;
    Ok(())
}

/// Reads a checkpoint, converting stored values to `T` when the dtypes differ.
pub fn read_checkpoint<T: Scalar, R: Read>(
    mut input: R,
) -> Result<(CheckpointHeader, ParamStore<T>), CheckpointError> {
    let mut magic = [0u8; 8];
    input.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let mut len = [0u8; 8];
    input.read_exact(&mut len)?;
    let mut json = vec![0u8; u64::from_le_bytes(len) as usize];
    input.read_exact(&mut json)?;
    let header: CheckpointHeader = serde_json::from_slice(&json)?;
    let store = match header.dtype.as_str() {
        "f32" => read_blocks::<f32, T, R>(&header, &mut input)?,
        "f64" => read_blocks::<f64, T, R>(&header, &mut input)?,
        other => return Err(CheckpointError::Dtype(other.to_string())),
    };
    Ok((header, store))
}

fn read_blocks<S: Scalar, T: Scalar, R: Read>(
    header: &CheckpointHeader,
    input: &mut R,
) -> Result<ParamStore<T>, CheckpointError> {
    let mut store = ParamStore::new();
    for entry in &header.tensors {
        let count: usize = entry.shape.iter().product();
        let mut raw = vec![0u8; count * S::BYTES];
        input.read_exact(&mut raw)?;
        let values: Vec<T> = raw
            .chunks_exact(S::BYTES)
            .map(|c| T::of(S::read_le(c).as_f64()))
            .collect();
        let tensor = Tensor::new(&entry.shape, values).map_err(|e| CheckpointError::Tensor {
            name: entry.name.clone(),
            msg: e.to_string(),
        })?;
        if !tensor.is_finite() {
            return Err(CheckpointError::Tensor {
                name: entry.name.clone(),
                msg: "non-finite values".into(),
            });
        }
        store.add(entry.name.clone(), tensor);
    }
    Ok(store)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bitwise() {
        let mut store = ParamStore::<f64>::new();
        store.add(
            "w",
            Tensor::from_f64(&[2, 2], &[0.1, -0.2, 1e-300, 3.0]).unwrap(),
        );
        store.add("b", Tensor::from_f64(&[3], &[0.0, -0.0, 7.5]).unwrap());
        let mut bytes = Vec::new();
        write_checkpoint(&mut bytes, &store, 42, "abc", serde_json::json!({"k": 1})).unwrap();
        assert_eq!(&bytes[..8], MAGIC);
        let (header, loaded) = read_checkpoint::<f64, _>(bytes.as_slice()).unwrap();
        assert_eq!(header.seed, 42);
        assert_eq!(header.vocab_hash, "abc");
        assert_eq!(header.tensors[0].shape, vec![2, 2]);
        for ((_, n1, a), (_, n2, b)) in store.iter().zip(loaded.iter()) {
            assert_eq!(n1, n2);
            let bits_a: Vec<u64> = a.data().iter().map(|v| v.to_bits()).collect();
            let bits_b: Vec<u64> = b.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(bits_a, bits_b);
        }
    }

    #[test]
    fn reading_f32_into_f64_converts() {
        let mut store = ParamStore::<f32>::new();
        store.add("w", Tensor::from_f64(&[2], &[0.5, -1.25]).unwrap());
        let mut bytes = Vec::new();
        write_checkpoint(&mut bytes, &store, 0, "", serde_json::Value::Null).unwrap();
        let (_, loaded) = read_checkpoint::<f64, _>(bytes.as_slice()).unwrap();
        assert_eq!(loaded.get(loaded.id("w").unwrap()).data(), &[0.5, -1.25]);
    }

    #[test]
    fn rejects_foreign_bytes() {
        let err = read_checkpoint::<f64, _>(&b"PK\x03\x04 not a checkpoint"[..]).unwrap_err();
        assert!(matches!(err, CheckpointError::BadMagic));
    }
}
