//! Checkpoint archives: a safetensors file of `f32` parameters keyed by
//! canonical dot-path names, with the model config and its digest stored as
//! JSON under the `skelevision` metadata key.

use std::collections::HashMap;
use std::path::Path;

use safetensors::tensor::{Dtype, SafeTensors, TensorView};
use serde::{Deserialize, Serialize};

use super::{Model, ModelConfig, ParamStore};
use crate::autograd::Tensor;
use crate::{Error, Result};

const METADATA_KEY: &str = "skelevision";
const FORMAT: &str = "skelevision-checkpoint/1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format: String,
    pub digest: String,
    pub config: ModelConfig,
}

fn ckpt_err(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

pub fn checkpoint_bytes(model: &Model) -> Result<Vec<u8>> {
    let header = CheckpointHeader {
        format: FORMAT.into(),
        digest: model.digest(),
        config: model.config.clone(),
    };
    let encoded: Vec<(String, Vec<u8>, Vec<usize>)> = model
        .params
        .iter()
        .map(|(name, t)| {
            let bytes = t
                .data()
                .iter()
                .flat_map(|&v| (v as f32).to_le_bytes())
                .collect();
            (name.clone(), bytes, t.shape().to_vec())
        })
        .collect();
    let views = encoded
        .iter()
        .map(|(name, bytes, shape)| {
            TensorView::new(Dtype::F32, shape.clone(), bytes)
                .map(|v| (name.as_str(), v))
                .map_err(|e| ckpt_err(format!("{name}: {e}")))
        })
        .collect::<Result<Vec<_>>>()?;
    let metadata = HashMap::from([(METADATA_KEY.to_string(), serde_json::to_string(&header)?)]);
    safetensors::serialize(views, &Some(metadata)).map_err(|e| ckpt_err(e.to_string()))
}

pub fn save_checkpoint(model: &Model, path: &Path) -> Result<()> {
    let bytes = checkpoint_bytes(model)?;
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn model_from_bytes(bytes: &[u8], expected: Option<&ModelConfig>) -> Result<Model> {
    let (_, meta) = SafeTensors::read_metadata(bytes).map_err(|e| ckpt_err(e.to_string()))?;
    let raw = meta
        .metadata()
        .as_ref()
        .and_then(|m| m.get(METADATA_KEY))
        .ok_or_else(|| ckpt_err("missing skelevision header"))?;
    let header: CheckpointHeader = serde_json::from_str(raw)?;
    if header.format != FORMAT {
        return Err(ckpt_err(format!("unsupported format {}", header.format)));
    }
    if header.config.digest() != header.digest {
        return Err(ckpt_err("stored digest does not match stored config"));
    }
    if let Some(cfg) = expected {
        if cfg.digest() != header.digest {
            return Err(ckpt_err(format!(
                "config digest mismatch: checkpoint {} vs requested {}",
                header.digest,
                cfg.digest()
            )));
        }
    }
    let st = SafeTensors::deserialize(bytes).map_err(|e| ckpt_err(e.to_string()))?;
    let shapes = header.config.param_shapes();
    if st.len() != shapes.len() {
        return Err(ckpt_err(format!(
            "expected {} tensors, archive has {}",
            shapes.len(),
            st.len()
        )));
    }
    let mut params = ParamStore::new();
    for (name, shape) in shapes {
        let view = st
            .tensor(&name)
            .map_err(|_| ckpt_err(format!("missing tensor {name}")))?;
        if view.dtype() != Dtype::F32 || view.shape() != shape.as_slice() {
            return Err(ckpt_err(format!(
                "{name}: expected f32 {shape:?}, found {:?} {:?}",
                view.dtype(),
                view.shape()
            )));
        }
        let data = view
            .data()
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
            .collect();
        params.insert(name, Tensor::new(&shape, data)?);
    }
    Ok(Model {
        config: header.config,
        params,
    })
}

/// Loads a checkpoint; when `expected` is given its digest must match.
pub fn load_checkpoint(path: &Path, expected: Option<&ModelConfig>) -> Result<Model> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    model_from_bytes(&bytes, expected)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::HeadDepth;

    #[test]
    fn save_load_save_is_byte_identical() {
        let model = Model::init(ModelConfig::default(), 3).unwrap();
        let a = checkpoint_bytes(&model).unwrap();
        let loaded = model_from_bytes(&a, Some(&model.config)).unwrap();
        assert_eq!(loaded, model);
        let b = checkpoint_bytes(&loaded).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn mismatched_head_depth_is_refused() {
        let model = Model::init(ModelConfig::default(), 3).unwrap();
        let bytes = checkpoint_bytes(&model).unwrap();
        let mut deep = ModelConfig::default();
        deep.keypoint_head.depth = HeadDepth::Deep;
        assert!(matches!(
            model_from_bytes(&bytes, Some(&deep)),
            Err(Error::Checkpoint(_))
        ));
    }

    #[test]
    fn tampered_digest_is_refused() {
        let model = Model::init(ModelConfig::default(), 3).unwrap();
        let bytes = checkpoint_bytes(&model).unwrap();
        let text = String::from_utf8_lossy(&bytes).into_owned();
        let digest = model.digest();
        let pos = text.find(&digest).unwrap();
        let mut tampered = bytes.clone();
        tampered[pos] = if tampered[pos] == b'0' { b'1' } else { b'0' };
        assert!(model_from_bytes(&tampered, None).is_err());
    }
}
