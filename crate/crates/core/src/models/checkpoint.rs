//! Binary checkpoint: magic `QTAC`, u32 LE version, u32-length-prefixed JSON
//! metadata, then a u32 count of named tensors, each stored as
//! `name_len u32, name utf-8, ndim u32, dims u32…, f32 LE data`, sorted by
//! name. All integers are little-endian.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{build_model, Model, ModelSpec};
use crate::encoders::{EmbeddingTable, Vocab};
use crate::error::{Error, Result};
use crate::fusion::QuestionTypeSet;
use crate::io::write_atomic;
use crate::numerics::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"QTAC";
pub const CHECKPOINT_VERSION: u32 = 1;

const FROZEN_NAME: &str = "frozen.table";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub spec: ModelSpec,
    pub vocab_hash: String,
    pub seed: u64,
    pub vocab: serde_json::Value,
    pub types: QuestionTypeSet,
    pub answers: Vec<String>,
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Format(format!("{v} does not fit in u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Format(format!("checkpoint truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }
}

pub fn encode_checkpoint(model: &Model) -> Result<Vec<u8>> {
    let meta = CheckpointMeta {
        spec: model.spec.clone(),
        vocab_hash: model.vocab.hash(),
        seed: model.spec.seed,
        vocab: model.vocab.to_json(),
        types: model.types.clone(),
        answers: model.answers.clone(),
    };
    let mut tensors: BTreeMap<&str, &Tensor> = model.params.iter().map(|(_, n, t)| (n, t)).collect();
    if let Some(f) = &model.frozen {
        tensors.insert(FROZEN_NAME, f.weights());
    }

    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let json = serde_json::to_vec(&meta)?;
    put_u32(&mut out, json.len())?;
    out.extend_from_slice(&json);
    put_u32(&mut out, tensors.len())?;
    for (name, t) in tensors {
        put_u32(&mut out, name.len())?;
        out.extend_from_slice(name.as_bytes());
        put_u32(&mut out, t.ndim())?;
        for &d in t.shape() {
            put_u32(&mut out, d)?;
        }
        for &v in t.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Model> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != CHECKPOINT_MAGIC {
        return Err(Error::Format("not a checkpoint (bad magic)".into()));
    }
    let version = r.u32()? as u32;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let len = r.u32()?;
    let meta: CheckpointMeta = serde_json::from_slice(r.take(len)?)?;
    let vocab = Vocab::from_json(&meta.vocab)?;
    if vocab.hash() != meta.vocab_hash {
        return Err(Error::Format("vocabulary hash mismatch".into()));
    }

    let count = r.u32()?;
    let mut tensors = BTreeMap::new();
    for _ in 0..count {
        let n = r.u32()?;
        let name = std::str::from_utf8(r.take(n)?)
            .map_err(|_| Error::Format("tensor name is not utf-8".into()))?
            .to_string();
        let ndim = r.u32()?;
        let shape = (0..ndim).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
        let size = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| Error::Format(format!("tensor {name} is too large")))?;
        let raw = r.take(size.checked_mul(4).ok_or_else(|| Error::Format("tensor too large".into()))?)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        tensors.insert(name, Tensor::new(shape, data)?);
    }
    if r.pos != bytes.len() {
        return Err(Error::Format(format!("{} trailing bytes after checkpoint", bytes.len() - r.pos)));
    }

    let mut model = build_model(&meta.spec, &vocab, &meta.types, &meta.answers)?;
    let ids: Vec<_> = model.params.ids().collect();
    for id in ids {
        let name = model.params.name(id).to_string();
        let t = tensors
            .remove(&name)
            .ok_or_else(|| Error::Format(format!("checkpoint is missing tensor {name}")))?;
        if t.shape() != model.params.get(id).shape() {
            return Err(Error::Format(format!(
                "tensor {name} has shape {:?}, model expects {:?}",
                t.shape(),
                model.params.get(id).shape()
            )));
        }
        *model.params.get_mut(id) = t;
    }
    match (model.frozen.as_mut(), tensors.remove(FROZEN_NAME)) {
        (Some(f), Some(t)) => {
            if t.shape() != f.weights().shape() {
                return Err(Error::Format(format!("frozen table has shape {:?}", t.shape())));
            }
            *f = EmbeddingTable::new(t, false)?;
        }
        (Some(_), None) => return Err(Error::Format(format!("checkpoint is missing tensor {FROZEN_NAME}"))),
        _ => {}
    }
    if let Some(extra) = tensors.keys().next() {
        return Err(Error::Format(format!("unexpected tensor {extra} in checkpoint")));
    }
    Ok(model)
}

pub fn save_checkpoint(model: &Model, path: &Path) -> Result<()> {
    write_atomic(path, &encode_checkpoint(model)?)
}

pub fn load_checkpoint(path: &Path) -> Result<Model> {
    decode_checkpoint(&std::fs::read(path)?)
}
