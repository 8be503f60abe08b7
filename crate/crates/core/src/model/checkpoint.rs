//! `FCK1` checkpoints: the model config and vocabulary as a JSON header,
//! then every named parameter tensor.
//!
//! ```text
//! "FCK1" | version u32 | meta_len u32 | meta JSON (UTF-8)
//! count u32
//! count × (name_len u16 | name | ndim u16 | ndim × dim u32)
//! Σ numel × f32                payload, in index order
//! ```
//!
//! All integers and floats are little-endian.

use std::fs;
use std::path::Path;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use super::params::Parameters;
use crate::dataset::Vocabulary;
use crate::error::{Error, Result};
use crate::features::{to_u32, write_atomic, ByteReader};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"FCK1";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Where training stood when the checkpoint was written.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainProgress {
    /// Last completed epoch.
    pub epoch: usize,
    pub step: usize,
    pub best_val_bleu4: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Meta {
    model: ModelConfig,
    #[serde(default)]
    vocab: Option<Vocabulary>,
    #[serde(default)]
    progress: Option<TrainProgress>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub params: Parameters,
    pub vocab: Option<Vocabulary>,
    pub progress: Option<TrainProgress>,
}

/// Raw named tensors in file order, without checking them against a config.
pub type TensorMap = IndexMap<String, Tensor>;

pub fn encode_tensors(meta_json: &[u8], tensors: &[(&str, &Tensor)]) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&to_u32(meta_json.len(), "metadata length")?.to_le_bytes());
    buf.extend_from_slice(meta_json);
    buf.extend_from_slice(&to_u32(tensors.len(), "tensor count")?.to_le_bytes());
    for (name, t) in tensors {
        if name.len() > u16::MAX as usize {
            return Err(Error::Format(format!("tensor name {name:?} is too long")));
        }
        buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(t.shape().len() as u16).to_le_bytes());
        for &d in t.shape() {
            buf.extend_from_slice(&to_u32(d, "dimension")?.to_le_bytes());
        }
    }
    for (_, t) in tensors {
        for &x in t.data() {
            buf.extend_from_slice(&(x as f32).to_le_bytes());
        }
    }
    Ok(buf)
}

pub fn decode_tensors(bytes: &[u8]) -> Result<(Vec<u8>, TensorMap)> {
    let mut r = ByteReader::new(bytes);
    let magic = r.take(4)?;
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::Format(format!(
            "bad magic {:?}, expected \"FCK1\"",
            String::from_utf8_lossy(magic)
        )));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!("unsupported FCK1 version {version}")));
    }
    let meta_len = r.u32()? as usize;
    let meta = r.take(meta_len)?.to_vec();
    let count = r.u32()? as usize;
    let mut index = Vec::with_capacity(count);
    for _ in 0..count {
        let name = r.string_u16()?;
        let ndim = r.u16()? as usize;
        let shape = (0..ndim)
            .map(|_| r.u32().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        index.push((name, shape));
    }
    let expected: usize = index
        .iter()
        .map(|(_, s)| s.iter().product::<usize>() * 4)
        .sum();
    if r.remaining() != expected {
        return Err(Error::Format(format!(
            "payload holds {} bytes, expected {expected}",
            r.remaining()
        )));
    }
    let mut map = TensorMap::with_capacity(count);
    for (name, shape) in index {
        let n = shape.iter().product();
        let t = Tensor::new(shape, r.f32s(n)?)?;
        if map.insert(name.clone(), t).is_some() {
            return Err(Error::Format(format!("duplicate tensor name {name:?}")));
        }
    }
    Ok((meta, map))
}

impl Checkpoint {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let meta = Meta {
            model: self.config.clone(),
            vocab: self.vocab.clone(),
            progress: self.progress.clone(),
        };
        let meta_json = serde_json::to_vec(&meta)?;
        let tensors: Vec<_> = self.params.iter().collect();
        write_atomic(path.as_ref(), &encode_tensors(&meta_json, &tensors)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Checkpoint::from_bytes(&fs::read(path.as_ref())?)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (meta_json, tensors) = decode_tensors(bytes)?;
        let meta: Meta = serde_json::from_slice(&meta_json)
            .map_err(|e| Error::Format(format!("checkpoint metadata: {e}")))?;
        meta.model.validate()?;
        let params = Parameters::from_tensors(&meta.model, tensors)?;
        let vocab = meta
            .vocab
            .map(|v| Vocabulary::from_tokens(v.tokens().to_vec(), v.min_freq, v.max_size));
        Ok(Checkpoint {
            config: meta.model,
            params,
            vocab,
            progress: meta.progress,
        })
    }
}
