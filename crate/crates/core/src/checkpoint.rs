//! Model checkpoints: every named parameter as a safetensors entry, plus a
//! versioned header carrying the model configuration.

use std::collections::HashMap;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use safetensors::{tensor::TensorView, Dtype, SafeTensors};
use serde::{Deserialize, Serialize};

use crate::diffusion::{LotsModel, ModelConfig};
use crate::error::{Error, Result};

pub const CHECKPOINT_FORMAT: &str = "lots-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Header stored in the safetensors metadata block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format: String,
    pub version: u32,
    pub k: usize,
    pub d: usize,
    pub blocks: usize,
    pub config: ModelConfig,
}

impl CheckpointMeta {
    fn for_config(cfg: &ModelConfig) -> Self {
        Self {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            k: cfg.pair_former.k,
            d: cfg.pair_former.d,
            blocks: cfg.pair_former.blocks,
            config: cfg.clone(),
        }
    }

    fn to_map(&self) -> Result<HashMap<String, String>> {
        let mut m = HashMap::new();
        m.insert("format".into(), self.format.clone());
        m.insert("version".into(), self.version.to_string());
        m.insert("k".into(), self.k.to_string());
        m.insert("d".into(), self.d.to_string());
        m.insert("blocks".into(), self.blocks.to_string());
        m.insert("config".into(), serde_json::to_string(&self.config)?);
        Ok(m)
    }

    fn from_map(m: &HashMap<String, String>) -> Result<Self> {
        let field = |k: &str| {
            m.get(k)
                .ok_or_else(|| Error::Checkpoint(format!("header field `{k}` missing")))
        };
        let num = |k: &str| -> Result<usize> {
            field(k)?
                .parse()
                .map_err(|_| Error::Checkpoint(format!("header field `{k}` is not a number")))
        };
        let format = field("format")?.clone();
        if format != CHECKPOINT_FORMAT {
            return Err(Error::Checkpoint(format!("unknown format `{format}`")));
        }
        let version = num("version")? as u32;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let config: ModelConfig = serde_json::from_str(field("config")?)
            .map_err(|e| Error::Checkpoint(format!("bad config: {e}")))?;
        let meta = Self {
            format,
            version,
            k: num("k")?,
            d: num("d")?,
            blocks: num("blocks")?,
            config,
        };
        let pf = &meta.config.pair_former;
        if (pf.k, pf.d, pf.blocks) != (meta.k, meta.d, meta.blocks) {
            return Err(Error::Checkpoint("header k/d/blocks disagree with config".into()));
        }
        Ok(meta)
    }
}

fn tensor_bytes(t: &Tensor) -> Result<(Dtype, Vec<u8>)> {
    let flat = t.flatten_all()?;
    Ok(match t.dtype() {
        DType::F64 => (
            Dtype::F64,
            flat.to_vec1::<f64>()?.iter().flat_map(|v| v.to_le_bytes()).collect(),
        ),
        _ => (
            Dtype::F32,
            flat.to_dtype(DType::F32)?
                .to_vec1::<f32>()?
                .iter()
                .flat_map(|v| v.to_le_bytes())
                .collect(),
        ),
    })
}

/// Serializes a model to checkpoint bytes.
pub fn checkpoint_bytes(model: &LotsModel) -> Result<Vec<u8>> {
    let mut owned = Vec::new();
    for (name, t, _) in model.store().iter() {
        let (dtype, bytes) = tensor_bytes(t)?;
        owned.push((name.to_string(), dtype, t.dims().to_vec(), bytes));
    }
    let views = owned
        .iter()
        .map(|(n, dt, shape, b)| {
            TensorView::new(*dt, shape.clone(), b)
                .map(|v| (n.clone(), v))
                .map_err(|e| Error::Checkpoint(e.to_string()))
        })
        .collect::<Result<Vec<_>>>()?;
    let meta = CheckpointMeta::for_config(model.config()).to_map()?;
    safetensors::serialize(views, Some(meta)).map_err(|e| Error::Checkpoint(e.to_string()))
}

/// Writes a checkpoint through a temporary file and a rename.
pub fn save_checkpoint(model: &LotsModel, path: &Path) -> Result<()> {
    let bytes = checkpoint_bytes(model)?;
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, &bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn read_meta(bytes: &[u8]) -> Result<CheckpointMeta> {
    let (_, md) = SafeTensors::read_metadata(bytes).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let map = md
        .metadata()
        .as_ref()
        .ok_or_else(|| Error::Checkpoint("no header metadata".into()))?;
    CheckpointMeta::from_map(map)
}

/// Rebuilds a model from checkpoint bytes, validating every tensor.
pub fn load_checkpoint_bytes(bytes: &[u8]) -> Result<LotsModel> {
    let meta = read_meta(bytes)?;
    let st = SafeTensors::deserialize(bytes).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let mut map = HashMap::new();
    for (name, view) in st.tensors() {
        let shape = view.shape().to_vec();
        let data = view.data();
        let t = match view.dtype() {
            Dtype::F32 => {
                let v: Vec<f32> = data
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                    .collect();
                Tensor::from_vec(v, shape, &Device::Cpu)?
            }
            Dtype::F64 => {
                let v: Vec<f64> = data
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                    .collect();
                Tensor::from_vec(v, shape, &Device::Cpu)?
            }
            other => return Err(Error::Checkpoint(format!("tensor {name} has unsupported dtype {other:?}"))),
        };
        if t.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?.iter().any(|v| !v.is_finite()) {
            return Err(Error::Checkpoint(format!("tensor {name} has non-finite values")));
        }
        map.insert(name, t);
    }
    let expected = map.len();
    let model = LotsModel::from_tensors(&meta.config, map)?;
    if model.store().len() != expected {
        return Err(Error::Checkpoint(format!(
            "checkpoint holds {expected} tensors, model uses {}",
            model.store().len()
        )));
    }
    Ok(model)
}

pub fn load_checkpoint(path: &Path) -> Result<LotsModel> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    load_checkpoint_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamGroup;

    #[test]
    fn round_trip_preserves_every_parameter() {
        let cfg = ModelConfig::tiny();
        let m = LotsModel::new(&cfg).unwrap();
        let bytes = checkpoint_bytes(&m).unwrap();
        let meta = read_meta(&bytes).unwrap();
        assert_eq!((meta.k, meta.d, meta.blocks), (4, 16, 2));
        let back = load_checkpoint_bytes(&bytes).unwrap();
        assert_eq!(back.config(), &cfg);
        for g in ParamGroup::ALL {
            assert_eq!(m.store().checksum(g).unwrap(), back.store().checksum(g).unwrap());
        }
    }

    #[test]
    fn corrupt_bytes_rejected() {
        let m = LotsModel::new(&ModelConfig::tiny()).unwrap();
        let mut bytes = checkpoint_bytes(&m).unwrap();
        assert!(load_checkpoint_bytes(&bytes[..bytes.len() / 2]).is_err());
        assert!(load_checkpoint_bytes(b"not a checkpoint").is_err());
        // poison one float with a NaN
        let n = bytes.len();
        bytes[n - 4..].copy_from_slice(&f32::NAN.to_le_bytes());
        assert!(load_checkpoint_bytes(&bytes).is_err());
    }
}
