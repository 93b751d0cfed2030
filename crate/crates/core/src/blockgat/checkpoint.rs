//! Binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic      8 bytes  "BLKFOLD\0"
//! version    u32      CHECKPOINT_VERSION
//! header     u64 length + UTF-8 JSON (CheckpointHeader)
//! count      u64      number of tensors
//! tensor*    u32 name length, name bytes, u64 rows, u64 cols, rows·cols f64
//! ```
//!
//! Tensors are written in name order, so identical state gives identical bytes.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

use super::{Model, ModelConfig};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"BLKFOLD\0";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Position in a training run, stored alongside the weights for resuming.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingState {
    pub epochs_done: usize,
    pub steps_done: usize,
    pub best_valid_median: Option<f64>,
    pub best_epoch: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub model: ModelConfig,
    pub class_names: Vec<String>,
    pub init_seed: u64,
    pub training: Option<TrainingState>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub tensors: BTreeMap<String, Tensor>,
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

impl Checkpoint {
    pub fn from_model(model: &Model, class_names: Vec<String>) -> Self {
        let tensors = model
            .params
            .iter()
            .map(|(_, p)| (p.name.clone(), p.value.clone()))
            .collect();
        Self {
            header: CheckpointHeader {
                model: model.config.clone(),
                class_names,
                init_seed: model.params.seed(),
                training: None,
            },
            tensors,
        }
    }

    /// Rebuilds the model and loads every parameter by name.
    pub fn to_model(&self) -> Result<Model> {
        let mut model = Model::new(self.header.model.clone(), self.header.init_seed)?;
        let names: Vec<String> = model.params.iter().map(|(_, p)| p.name.clone()).collect();
        for name in names {
            let t = self
                .tensors
                .get(&name)
                .ok_or_else(|| bad(format!("missing tensor {name}")))?;
            let id = model.params.id(&name).unwrap();
            let p = model.params.get_mut(id);
            if p.value.dim() != t.dim() {
                return Err(bad(format!("shape mismatch for {name}: {:?} vs {:?}", p.value.dim(), t.dim())));
            }
            p.value.assign(t);
        }
        Ok(model)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        let header = serde_json::to_vec(&self.header).map_err(|e| bad(e.to_string()))?;
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&(self.tensors.len() as u64).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.nrows() as u64).to_le_bytes());
            out.extend_from_slice(&(t.ncols() as u64).to_le_bytes());
            for v in t.iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = bytes;
        let mut magic = [0u8; 8];
        read_exact(&mut r, &mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(bad("not a blockfold checkpoint"));
        }
        let version = u32::from_le_bytes(take(&mut r)?);
        if version != CHECKPOINT_VERSION {
            return Err(bad(format!("unsupported checkpoint version {version}")));
        }
        let header_len = u64::from_le_bytes(take(&mut r)?) as usize;
        if header_len > r.len() {
            return Err(bad("truncated header"));
        }
        let header: CheckpointHeader =
            serde_json::from_slice(&r[..header_len]).map_err(|e| bad(format!("header: {e}")))?;
        r = &r[header_len..];
        let count = u64::from_le_bytes(take(&mut r)?);
        let mut tensors = BTreeMap::new();
        for _ in 0..count {
            let name_len = u32::from_le_bytes(take(&mut r)?) as usize;
            if name_len > r.len() {
                return Err(bad("truncated tensor name"));
            }
            let name = std::str::from_utf8(&r[..name_len])
                .map_err(|_| bad("tensor name is not UTF-8"))?
                .to_string();
            r = &r[name_len..];
            let rows = u64::from_le_bytes(take(&mut r)?) as usize;
            let cols = u64::from_le_bytes(take(&mut r)?) as usize;
            let n = rows.checked_mul(cols).ok_or_else(|| bad("tensor too large"))?;
            if n.checked_mul(8).is_none_or(|b| b > r.len()) {
                return Err(bad(format!("truncated tensor {name}")));
            }
            let values: Vec<f64> = (0..n).map(|_| f64::from_le_bytes(take(&mut r).unwrap())).collect();
            let t = Tensor::from_shape_vec((rows, cols), values).map_err(|e| bad(e.to_string()))?;
            tensors.insert(name, t);
        }
        if !r.is_empty() {
            return Err(bad("trailing bytes"));
        }
        Ok(Self { header, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

fn read_exact(r: &mut &[u8], buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|_| bad("unexpected end of checkpoint"))
}

fn take<const N: usize>(r: &mut &[u8]) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    read_exact(r, &mut buf)?;
    Ok(buf)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::EntityKind;

    #[test]
    fn round_trip_preserves_model() {
        let mut cfg = ModelConfig::for_entity(EntityKind::Rna, 4);
        cfg.gat.layers = 1;
        cfg.gat.hidden = 8;
        let mut model = Model::new(cfg, 5).unwrap();
        model.params.randomize(9, 0.3);
        let ck = Checkpoint::from_model(&model, vec!["A".into(), "U".into(), "C".into(), "G".into()]);
        let bytes = ck.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes().unwrap(), bytes);
        assert!(back.to_model().unwrap().params.same_values(&model.params));
    }

    #[test]
    fn rejects_corrupt_input() {
        assert!(Checkpoint::from_bytes(b"nope").is_err());
        let mut cfg = ModelConfig::for_entity(EntityKind::Protein, 20);
        cfg.gat.layers = 0;
        cfg.gat.hidden = 4;
        let model = Model::new(cfg, 1).unwrap();
        let bytes = Checkpoint::from_model(&model, vec![]).to_bytes().unwrap();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        let mut wrong = bytes.clone();
        wrong[8] = 9;
        assert!(Checkpoint::from_bytes(&wrong).is_err());
    }
}
