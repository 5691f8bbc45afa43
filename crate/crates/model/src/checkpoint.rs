//! Checkpoint container.
//!
//! ```text
//! b"STFMCKPT"  u32 version  u64 header_len  header JSON  f32 LE payload  sha256
//! ```
//!
//! The header holds the model config, training metadata and an index of
//! named arrays (offsets in f32 elements into the payload). Optimiser
//! moments, when present, are stored as `adam.m.<name>` / `adam.v.<name>`.
//! The trailing digest covers every preceding byte; its hex form is the
//! model version.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use candle_core::{DType, Device};

use crate::config::ModelConfig;
use crate::error::{ModelError, Result};
use crate::network::StampFormer;
use crate::optim::Adam;

pub const MAGIC: &[u8; 8] = b"STFMCKPT";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct CheckpointMeta {
    pub field: String,
    #[serde(default)]
    pub family: Option<String>,
    pub epoch: usize,
    pub best_val_loss: Option<f64>,
    /// Raster pitch of the training data.
    #[serde(default)]
    pub pitch_mm: Option<f64>,
    #[serde(default)]
    pub train_config: Option<serde_json::Value>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub model: ModelConfig,
    pub meta: CheckpointMeta,
    pub tensors: Vec<TensorEntry>,
    #[serde(default)]
    pub adam_step: Option<u64>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub header: Header,
    pub arrays: BTreeMap<String, (Vec<usize>, Vec<f32>)>,
    pub hash: String,
}

const ADAM_M: &str = "adam.m.";
const ADAM_V: &str = "adam.v.";

impl Checkpoint {
    pub fn from_model(model: &StampFormer, meta: CheckpointMeta, adam: Option<&Adam>) -> Result<Self> {
        let mut arrays = BTreeMap::new();
        for (name, shape, data) in model.params.export()? {
            arrays.insert(name, (shape, data.into_iter().map(|v| v as f32).collect()));
        }
        let names = model.params.names();
        if let Some(opt) = adam {
            for (i, name) in names.iter().enumerate() {
                let shape = arrays[name].0.clone();
                arrays.insert(format!("{ADAM_M}{name}"), (shape.clone(), opt.m[i].clone()));
                arrays.insert(format!("{ADAM_V}{name}"), (shape, opt.v[i].clone()));
            }
        }
        let mut offset = 0;
        let tensors = arrays
            .iter()
            .map(|(name, (shape, data))| {
                let e = TensorEntry {
                    name: name.clone(),
                    shape: shape.clone(),
                    offset,
                };
                offset += data.len();
                e
            })
            .collect();
        let header = Header {
            model: model.config.clone(),
            meta,
            tensors,
            adam_step: adam.map(|a| a.step),
        };
        let mut ck = Self {
            header,
            arrays,
            hash: String::new(),
        };
        let bytes = ck.to_bytes()?;
        ck.hash = hex::encode(&bytes[bytes.len() - 32..]);
        Ok(ck)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&self.header).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
        let mut out = Vec::with_capacity(header.len() + 64);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for e in &self.header.tensors {
            for v in &self.arrays[&e.name].1 {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| ModelError::Checkpoint(m.to_string());
        if bytes.len() < 8 + 4 + 8 + 32 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != VERSION {
            return Err(ModelError::Checkpoint(format!("unsupported checkpoint version {version}")));
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err(bad("checksum mismatch (file truncated or corrupted)"));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let hend = 20usize.checked_add(hlen).filter(|&e| e <= body.len()).ok_or_else(|| bad("header length out of range"))?;
        let header: Header = serde_json::from_slice(&bytes[20..hend]).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
        let payload = &body[hend..];
        if payload.len() % 4 != 0 {
            return Err(bad("payload is not a whole number of f32 values"));
        }
        let floats: Vec<f32> = payload
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        let mut arrays = BTreeMap::new();
        for e in &header.tensors {
            let n: usize = e.shape.iter().product();
            let end = e.offset.checked_add(n).filter(|&x| x <= floats.len()).ok_or_else(|| {
                ModelError::Checkpoint(format!("tensor {} runs past the payload", e.name))
            })?;
            arrays.insert(e.name.clone(), (e.shape.clone(), floats[e.offset..end].to_vec()));
        }
        Ok(Self {
            header,
            arrays,
            hash: hex::encode(digest),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        stamp_core::grid::write_atomic(path, &self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| ModelError::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Rebuilds the network with the stored weights; every parameter must be
    /// present with a matching shape.
    pub fn to_model(&self, dtype: DType, device: &Device) -> Result<StampFormer> {
        let model = StampFormer::new(&self.header.model, 0, dtype, device)?;
        let names = model.params.names();
        for name in &names {
            let (shape, data) = self
                .arrays
                .get(name)
                .ok_or_else(|| ModelError::Checkpoint(format!("checkpoint lacks parameter {name}")))?;
            let values: Vec<f64> = data.iter().map(|&v| v as f64).collect();
            model.params.assign(name, shape, &values)?;
        }
        let extra = self
            .arrays
            .keys()
            .filter(|k| !k.starts_with(ADAM_M) && !k.starts_with(ADAM_V) && !names.contains(k))
            .count();
        if extra > 0 {
            return Err(ModelError::Checkpoint(format!("checkpoint holds {extra} unknown parameters")));
        }
        Ok(model)
    }

    /// Restores optimiser moments into `adam` (built over `model`'s vars).
    pub fn restore_adam(&self, model: &StampFormer, adam: &mut Adam) -> Result<()> {
        let step = self
            .header
            .adam_step
            .ok_or_else(|| ModelError::Checkpoint("checkpoint has no optimiser state".into()))?;
        for (i, name) in model.params.names().iter().enumerate() {
            let m = self.arrays.get(&format!("{ADAM_M}{name}"));
            let v = self.arrays.get(&format!("{ADAM_V}{name}"));
            match (m, v) {
                (Some(m), Some(v)) => {
                    adam.m[i] = m.1.clone();
                    adam.v[i] = v.1.clone();
                }
                _ => return Err(ModelError::Checkpoint(format!("optimiser state missing for {name}"))),
            }
        }
        adam.step = step;
        Ok(())
    }

    pub fn model_version(&self) -> &str {
        &self.hash
    }
}
