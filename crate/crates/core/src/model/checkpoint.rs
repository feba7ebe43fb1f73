//! Checkpoint container:
//!
//! ```text
//! "TSACKPT1"                       8-byte magic
//! u64 little-endian                manifest length in bytes
//! JSON manifest                    {"config": {...}, "tensors": [{"name", "shape", "offset"}]}
//! f32 little-endian payloads       densely packed in manifest order
//! ```
//!
//! `offset` is the byte offset of a tensor's payload from the start of the
//! payload section.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Model, ModelConfig};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"TSACKPT1";

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    config: ModelConfig,
    tensors: Vec<TensorEntry>,
}

pub fn encode_checkpoint(model: &Model) -> Result<Vec<u8>> {
    let mut offset = 0u64;
    let mut entries = Vec::new();
    for (name, t) in model.named_tensors() {
        entries.push(TensorEntry {
            name,
            shape: t.shape().to_vec(),
            offset,
        });
        offset += 4 * t.numel() as u64;
    }
    let manifest = serde_json::to_vec(&Manifest {
        config: model.config.clone(),
        tensors: entries,
    })?;
    let mut out = Vec::with_capacity(16 + manifest.len() + offset as usize);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
    out.extend_from_slice(&manifest);
    for (_, t) in model.named_tensors() {
        for x in t.data() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Model> {
    if bytes.len() < 16 || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint("bad magic, not a TSACKPT1 checkpoint".into()));
    }
    let manifest_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let payload_start = 16usize
        .checked_add(manifest_len)
        .filter(|&end| end <= bytes.len())
        .ok_or_else(|| Error::Checkpoint("manifest extends past end of file".into()))?;
    let manifest: Manifest = serde_json::from_slice(&bytes[16..payload_start])
        .map_err(|e| Error::Checkpoint(format!("unreadable manifest: {e}")))?;
    manifest
        .config
        .validate()
        .map_err(|e| Error::Checkpoint(e.to_string()))?;
    let payload = &bytes[payload_start..];

    let mut tensors = Vec::new();
    for (name, shape) in Model::tensor_layout(&manifest.config) {
        let entry = manifest
            .tensors
            .iter()
            .find(|e| e.name == name)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor '{name}'")))?;
        if entry.shape != shape {
            return Err(Error::Checkpoint(format!(
                "tensor '{name}' has shape {:?}, config expects {shape:?}",
                entry.shape
            )));
        }
        let numel: usize = shape.iter().product();
        let start = entry.offset as usize;
        let raw = start
            .checked_add(4 * numel)
            .and_then(|end| payload.get(start..end))
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor '{name}': payload truncated")))?;
        let data = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
            .collect();
        tensors.push(Tensor::new(shape, data)?);
    }
    Model::from_tensors(manifest.config, tensors)
}

pub fn save_checkpoint(model: &Model, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_checkpoint(model)?)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Model> {
    decode_checkpoint(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::SparsePlan;

    fn small() -> Model {
        let config = ModelConfig {
            n_layers: 2,
            n_heads: 2,
            n_kv_heads: 1,
            d_model: 8,
            d_head: 4,
            d_ff: 12,
            vocab_size: 16,
            ..ModelConfig::default()
        };
        Model::init_random(config, 3).unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let m = small();
        let back = decode_checkpoint(&encode_checkpoint(&m).unwrap()).unwrap();
        for ((na, a), (nb, b)) in m.named_tensors().into_iter().zip(back.named_tensors()) {
            assert_eq!(na, nb);
            let bits = |t: &Tensor| t.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(a), bits(b));
        }
        assert_eq!(m, back);
    }

    #[test]
    fn reloaded_model_gives_identical_logits() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("toy.ckpt");
        let m = small();
        save_checkpoint(&m, &path).unwrap();
        let back = load_checkpoint(&path).unwrap();
        let toks = [1, 5, 9, 2, 15];
        let plan = SparsePlan::dynamic([1], 0.2);
        assert_eq!(
            m.forward(&toks, &plan).unwrap().logits,
            back.forward(&toks, &plan).unwrap().logits
        );
    }

    #[test]
    fn truncated_file_names_missing_tensor() {
        let bytes = encode_checkpoint(&small()).unwrap();
        let err = decode_checkpoint(&bytes[..bytes.len() - 4]).unwrap_err().to_string();
        assert!(err.contains("lm_head"), "{err}");
    }

    #[test]
    fn bad_magic_is_rejected() {
        let mut bytes = encode_checkpoint(&small()).unwrap();
        bytes[0] = b'X';
        assert!(decode_checkpoint(&bytes).unwrap_err().to_string().contains("magic"));
        assert!(decode_checkpoint(b"TSA").is_err());
    }

    #[test]
    fn missing_and_misshapen_tensors_are_reported() {
        let m = small();
        let bytes = encode_checkpoint(&m).unwrap();
        let len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let payload = &bytes[16 + len..];
        let mut manifest: Manifest = serde_json::from_slice(&bytes[16..16 + len]).unwrap();

        let rebuild = |manifest: &Manifest| {
            let json = serde_json::to_vec(manifest).unwrap();
            let mut out = CHECKPOINT_MAGIC.to_vec();
            out.extend_from_slice(&(json.len() as u64).to_le_bytes());
            out.extend_from_slice(&json);
            out.extend_from_slice(payload);
            out
        };

        manifest.tensors[2].shape = vec![1, 2];
        let err = decode_checkpoint(&rebuild(&manifest)).unwrap_err().to_string();
        assert!(err.contains("layers.0.wq"), "{err}");

        manifest.tensors.remove(2);
        let err = decode_checkpoint(&rebuild(&manifest)).unwrap_err().to_string();
        assert!(err.contains("missing tensor 'layers.0.wq'"), "{err}");
    }
}
