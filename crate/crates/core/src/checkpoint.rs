//! Single-file checkpoint archive.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic   8 bytes  "S4CKPT\0\0"
//! version u32
//! hlen    u64      length of the JSON header
//! header  hlen bytes of UTF-8 JSON
//! blobs   float32 tensors, concatenated in header order
//! ```
//!
//! The header carries the configs, epoch, seed, normalisation statistics,
//! loss history and an index of `{name, len, offset}` for every tensor.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data_io::{decode_f32, encode_f32};
use crate::error::{Result, S4Error};
use crate::losses::LossConfig;
use crate::models::{ModelConfig, S4Net};
use crate::nn::Module;
use crate::optim::Adam;
use crate::sits::NormalizationStats;
use crate::training::{EpochMetrics, TrainConfig};

pub const MAGIC: &[u8; 8] = b"S4CKPT\0\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Init,
    Pretrain,
    Finetune,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: S4Net,
    pub train: TrainConfig,
    pub loss: LossConfig,
    pub normalization: NormalizationStats,
    pub phase: Phase,
    /// Completed epochs of `phase`.
    pub epoch: usize,
    pub optimizer: Adam,
    pub history: Vec<EpochMetrics>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    len: usize,
    offset: usize,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    schema_version: u32,
    model: ModelConfig,
    train: TrainConfig,
    loss: LossConfig,
    normalization: NormalizationStats,
    phase: Phase,
    epoch: usize,
    seed: u64,
    optimizer_step: u64,
    history: Vec<EpochMetrics>,
    tensors: Vec<TensorEntry>,
}

impl Checkpoint {
    pub fn model_config(&self) -> &ModelConfig {
        self.model.config()
    }

    fn tensors(&mut self) -> BTreeMap<String, Vec<f32>> {
        let mut out = BTreeMap::new();
        self.model.visit_params("", &mut |name, p| {
            out.insert(format!("param/{name}"), p.value.clone());
        });
        self.model.visit_buffers("", &mut |name, b| {
            out.insert(format!("buffer/{name}"), b.clone());
        });
        for (name, (m, v)) in self.optimizer.moments() {
            out.insert(format!("adam_m/{name}"), m.clone());
            out.insert(format!("adam_v/{name}"), v.clone());
        }
        out
    }

    pub fn to_bytes(&mut self) -> Result<Vec<u8>> {
        let tensors = self.tensors();
        let mut index = Vec::with_capacity(tensors.len());
        let mut offset = 0;
        for (name, values) in &tensors {
            index.push(TensorEntry {
                name: name.clone(),
                len: values.len(),
                offset,
            });
            offset += values.len() * 4;
        }
        let header = Header {
            schema_version: FORMAT_VERSION,
            model: self.model.config().clone(),
            train: self.train.clone(),
            loss: self.loss.clone(),
            normalization: self.normalization.clone(),
            phase: self.phase,
            epoch: self.epoch,
            seed: self.train.seed,
            optimizer_step: self.optimizer.step_count(),
            history: self.history.clone(),
            tensors: index,
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(20 + json.len() + offset);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for values in tensors.values() {
            out.extend_from_slice(&encode_f32(values));
        }
        Ok(out)
    }

    pub fn save(&mut self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let mut f = fs::File::create(path)?;
        f.write_all(&bytes)?;
        Ok(())
    }

    pub fn from_bytes(bytes: &[u8], expected: Option<&ModelConfig>) -> Result<Self> {
        let corrupt = |m: &str| S4Error::CorruptArchive(format!("checkpoint: {m}"));
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(corrupt("bad magic"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(S4Error::UnsupportedSchema(version));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let body = bytes.get(20..20 + hlen).ok_or_else(|| corrupt("truncated header"))?;
        let header: Header = serde_json::from_slice(body)
            .map_err(|e| S4Error::CorruptArchive(format!("checkpoint header: {e}")))?;
        if let Some(cfg) = expected {
            if cfg != &header.model {
                return Err(S4Error::IncompatibleCheckpoint(format!(
                    "model config differs: checkpoint {:?}, expected {cfg:?}",
                    header.model
                )));
            }
        }
        let blobs = &bytes[20 + hlen..];
        let mut tensors: BTreeMap<String, Vec<f32>> = BTreeMap::new();
        for e in &header.tensors {
            let raw = blobs
                .get(e.offset..e.offset + e.len * 4)
                .ok_or_else(|| corrupt(&format!("tensor {} out of bounds", e.name)))?;
            tensors.insert(e.name.clone(), decode_f32(raw));
        }
        let mut model = S4Net::new(header.model.clone())?;
        let mut missing = Vec::new();
        model.visit_params("", &mut |name, p| match tensors.remove(&format!("param/{name}")) {
            Some(v) if v.len() == p.value.len() => p.value = v,
            _ => missing.push(name.to_string()),
        });
        model.visit_buffers("", &mut |name, b| match tensors.remove(&format!("buffer/{name}")) {
            Some(v) if v.len() == b.len() => *b = v,
            _ => missing.push(name.to_string()),
        });
        if !missing.is_empty() {
            return Err(S4Error::IncompatibleCheckpoint(format!(
                "missing or mis-sized tensors: {}",
                missing.join(", ")
            )));
        }
        let mut moments = BTreeMap::new();
        for (name, m) in &tensors {
            if let Some(param) = name.strip_prefix("adam_m/") {
                let v = tensors
                    .get(&format!("adam_v/{param}"))
                    .ok_or_else(|| corrupt(&format!("adam_v missing for {param}")))?;
                moments.insert(param.to_string(), (m.clone(), v.clone()));
            }
        }
        let optimizer = Adam::restore(&header.train, header.optimizer_step, moments);
        Ok(Self {
            model,
            train: header.train,
            loss: header.loss,
            normalization: header.normalization,
            phase: header.phase,
            epoch: header.epoch,
            optimizer,
            history: header.history,
        })
    }

    /// Loads a checkpoint; when `expected` is given the stored model config
    /// must equal it before any weight is assigned.
    pub fn load(path: &Path, expected: Option<&ModelConfig>) -> Result<Self> {
        if !path.exists() {
            return Err(S4Error::MissingFile(path.to_path_buf()));
        }
        Self::from_bytes(&fs::read(path)?, expected)
    }
}
