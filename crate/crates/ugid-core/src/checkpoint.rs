//! Binary checkpoint format.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic   4 bytes  "UGID"
//! version u32      currently 1
//! count   u32      number of tensors
//! per tensor:
//!   name_len u16, name bytes (UTF-8),
//!   rank u8, dims u32 × rank,
//!   payload f64 × numel
//! ```
//!
//! The [`ModelConfig`] is serialized as a JSON object alongside the binary
//! file (`foo.ugid` ↔ `foo.config.json`). Writing is canonical-ordered, so
//! identical parameters always produce identical bytes.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use thiserror::Error;

use crate::autodiff::Tensor;
use crate::model::{Model, ModelConfig, ModelError, Params};

const MAGIC: &[u8; 4] = b"UGID";
const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("bad magic bytes: not a checkpoint file")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    BadVersion(u32),
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("config json: {0}")]
    ConfigJson(#[from] serde_json::Error),
    #[error("checkpoint does not match config: {0}")]
    Mismatch(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CheckpointError + '_ {
    move |source| CheckpointError::Io { path: path.to_path_buf(), source }
}

/// Sibling JSON path for a checkpoint: `dir/name.ugid` → `dir/name.config.json`.
pub fn config_path(checkpoint: &Path) -> PathBuf {
    checkpoint.with_extension("config.json")
}

/// Serialize the named tensors in their given order.
pub fn encode(tensors: &[(String, &Tensor)]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, tensor) in tensors {
        let name_bytes = name.as_bytes();
        out.extend_from_slice(&(name_bytes.len() as u16).to_le_bytes());
        out.extend_from_slice(name_bytes);
        out.push(tensor.shape().len() as u8);
        for &d in tensor.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in tensor.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

/// Parse a checkpoint byte stream back into named tensors.
pub fn decode(bytes: &[u8]) -> Result<Vec<(String, Tensor)>, CheckpointError> {
    let mut cur = bytes;
    let mut take = |n: usize| -> Result<&[u8], CheckpointError> {
        if cur.len() < n {
            return Err(CheckpointError::Corrupt("unexpected end of file".into()));
        }
        let (head, tail) = cur.split_at(n);
        cur = tail;
        Ok(head)
    };

    if take(4)? != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = u32::from_le_bytes(take(4)?.try_into().unwrap());
    if version != VERSION {
        return Err(CheckpointError::BadVersion(version));
    }
    let count = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;

    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = u16::from_le_bytes(take(2)?.try_into().unwrap()) as usize;
        let name = String::from_utf8(take(name_len)?.to_vec())
            .map_err(|_| CheckpointError::Corrupt("tensor name is not UTF-8".into()))?;
        let rank = take(1)?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize);
        }
        let numel: usize = shape.iter().product();
        let payload = take(numel * 8)?;
        let data: Vec<f64> = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let tensor = Tensor::new(shape, data)
            .map_err(|e| CheckpointError::Corrupt(format!("tensor {name}: {e}")))?;
        tensors.push((name, tensor));
    }
    if !cur.is_empty() {
        return Err(CheckpointError::Corrupt("trailing bytes after last tensor".into()));
    }
    Ok(tensors)
}

/// Write the model's parameters plus its config JSON next to it.
pub fn save(model: &Model, path: &Path) -> Result<(), CheckpointError> {
    let bytes = encode(&model.params.named());
    let mut f = fs::File::create(path).map_err(io_err(path))?;
    f.write_all(&bytes).map_err(io_err(path))?;
    let cfg_path = config_path(path);
    let json = serde_json::to_string_pretty(&model.config)?;
    fs::write(&cfg_path, json).map_err(io_err(&cfg_path))?;
    Ok(())
}

/// Read raw named tensors without reconstructing a model.
pub fn read_tensors(path: &Path) -> Result<Vec<(String, Tensor)>, CheckpointError> {
    let mut bytes = Vec::new();
    fs::File::open(path).map_err(io_err(path))?.read_to_end(&mut bytes).map_err(io_err(path))?;
    decode(&bytes)
}

/// Load a model from a checkpoint and its sibling config JSON.
pub fn load(path: &Path) -> Result<Model, CheckpointError> {
    let cfg_path = config_path(path);
    let cfg_json = fs::read_to_string(&cfg_path).map_err(io_err(&cfg_path))?;
    let config: ModelConfig = serde_json::from_str(&cfg_json)?;
    config.validate()?;
    let tensors = read_tensors(path)?;

    let mut model = Model::init(config)?;
    let expected: Vec<String> = model.params.named().iter().map(|(n, _)| n.clone()).collect();
    if tensors.len() != expected.len() {
        return Err(CheckpointError::Mismatch(format!(
            "expected {} tensors, found {}",
            expected.len(),
            tensors.len()
        )));
    }
    let mut by_name: std::collections::HashMap<String, Tensor> = tensors.into_iter().collect();
    for (name, slot) in model.params.named_mut() {
        let loaded = by_name
            .remove(&name)
            .ok_or_else(|| CheckpointError::Mismatch(format!("missing tensor {name}")))?;
        if loaded.shape() != slot.shape() {
            return Err(CheckpointError::Mismatch(format!(
                "tensor {name}: shape {:?} in file, {:?} per config",
                loaded.shape(),
                slot.shape()
            )));
        }
        *slot = loaded;
    }
    Ok(model)
}

/// Canonical parameter bytes, for immutability and determinism checks.
pub fn parameter_bytes(params: &Params) -> Vec<u8> {
    encode(&params.named())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn tiny_model(seed: u64) -> Model {
        let cfg = ModelConfig {
            vocab_size: 7,
            d_model: 8,
            n_layers: 4,
            n_heads: 2,
            d_ff: 12,
            max_seq_len: 6,
            seed,
        };
        Model::init(cfg).unwrap()
    }

    #[test]
    fn round_trip_is_exact() {
        let dir = std::env::temp_dir().join(format!("ugid-ckpt-{}", std::process::id()));
        fs::create_dir_all(&dir).unwrap();
        let path = dir.join("model.ugid");

        let model = tiny_model(5);
        save(&model, &path).unwrap();
        let loaded = load(&path).unwrap();
        assert_eq!(model, loaded);

        fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn identical_params_identical_bytes() {
        let a = tiny_model(5);
        let b = tiny_model(5);
        assert_eq!(parameter_bytes(&a.params), parameter_bytes(&b.params));
        let c = tiny_model(6);
        assert_ne!(parameter_bytes(&a.params), parameter_bytes(&c.params));
    }

    #[test]
    fn header_layout_is_pinned() {
        let model = tiny_model(1);
        let bytes = encode(&model.params.named());
        assert_eq!(&bytes[0..4], b"UGID");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        let count = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        assert_eq!(count as usize, model.params.named().len());
        // First record: name length then name.
        let name_len = u16::from_le_bytes(bytes[12..14].try_into().unwrap()) as usize;
        assert_eq!(&bytes[14..14 + name_len], b"token_embedding");
    }

    #[test]
    fn rejects_garbage() {
        assert!(matches!(decode(b"NOPE"), Err(CheckpointError::BadMagic)));
        let model = tiny_model(2);
        let mut bytes = encode(&model.params.named());
        bytes.truncate(bytes.len() - 3);
        assert!(matches!(decode(&bytes), Err(CheckpointError::Corrupt(_))));
    }
}
