//! Binary checkpoint container.
//!
//! Layout: magic `HLM1`, format version (u32 LE), manifest length (u64 LE),
//! UTF-8 JSON manifest, then the raw little-endian tensor payloads at the
//! offsets the manifest lists (relative to the payload start).

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::optim::{AdamW, AdamWConfig};
use crate::error::{bail, HlmError, Result};
use crate::model::{Model, ModelConfig, Weights};
use crate::tensor::{DType, Element, Tensor};

pub const MAGIC: &[u8; 4] = b"HLM1";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    PretrainedVanilla,
    PretrainedHeadless,
    HeadRecovered,
}

/// Where the data stream resumes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub next_batch: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    dtype: u32,
    offset: u64,
    nbytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct OptimizerMeta {
    step: u64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
    clip_norm: f64,
    /// Parameters the moments belong to, in order.
    params: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Manifest {
    stage: Stage,
    step: u64,
    model: ModelConfig,
    has_head: bool,
    config_digest: String,
    config: String,
    rng: RngState,
    tokenizer: Option<String>,
    optimizer: Option<OptimizerMeta>,
    tensors: Vec<TensorEntry>,
}

/// Optimizer moments paired with the names of the parameters they track.
#[derive(Debug, Clone)]
pub struct OptimizerSnapshot<T: Element> {
    pub state: AdamW<T>,
    pub params: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint<T: Element> {
    pub stage: Stage,
    pub step: u64,
    pub model: Model<T>,
    pub config_digest: String,
    /// Resolved run configuration text.
    pub config: String,
    pub rng: RngState,
    /// Tokenizer file contents, when the run had one.
    pub tokenizer: Option<String>,
    pub optimizer: Option<OptimizerSnapshot<T>>,
}

impl<T: Element> Checkpoint<T> {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut payload = Vec::new();
        let mut tensors = Vec::new();
        let mut put = |name: String, t: &Tensor<T>| {
            let offset = payload.len() as u64;
            for &x in t.data() {
                x.write_le(&mut payload);
            }
            tensors.push(TensorEntry {
                name,
                shape: t.shape().to_vec(),
                dtype: T::DTYPE.code(),
                offset,
                nbytes: payload.len() as u64 - offset,
            });
        };
        for (name, t) in self.model.params.entries() {
            put(name, t);
        }
        let optimizer = self.optimizer.as_ref().map(|o| {
            for (name, (m, v)) in o.params.iter().zip(o.state.m.iter().zip(&o.state.v)) {
                put(format!("adam.m.{name}"), m);
                put(format!("adam.v.{name}"), v);
            }
            let hp = o.state.hp;
            OptimizerMeta {
                step: o.state.step,
                beta1: hp.beta1,
                beta2: hp.beta2,
                eps: hp.eps,
                weight_decay: hp.weight_decay,
                clip_norm: hp.clip_norm,
                params: o.params.clone(),
            }
        });
        let manifest = Manifest {
            stage: self.stage,
            step: self.step,
            model: self.model.config.clone(),
            has_head: self.model.has_head(),
            config_digest: self.config_digest.clone(),
            config: self.config.clone(),
            rng: self.rng,
            tokenizer: self.tokenizer.clone(),
            optimizer,
            tensors,
        };
        let json = serde_json::to_vec(&manifest).map_err(|e| HlmError::Format(e.to_string()))?;
        let mut out = Vec::with_capacity(16 + json.len() + payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&payload);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..4] != MAGIC {
            bail!(Format, "not an HLM1 checkpoint");
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != VERSION {
            bail!(Format, "unsupported checkpoint version {version}");
        }
        let len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let json = bytes.get(16..16 + len).ok_or_else(|| HlmError::Format("truncated manifest".into()))?;
        let manifest: Manifest = serde_json::from_slice(json).map_err(|e| HlmError::Format(format!("manifest: {e}")))?;
        let payload = &bytes[16 + len..];
        let mut expected_end = 0u64;
        let mut read = |name: &str| -> Result<Tensor<T>> {
            let Some(e) = manifest.tensors.iter().find(|e| e.name == name) else {
                bail!(Format, "checkpoint lacks tensor {name}");
            };
            if DType::from_code(e.dtype) != Some(T::DTYPE) {
                bail!(Format, "{name}: dtype code {} does not match {:?}", e.dtype, T::DTYPE);
            }
            let numel: usize = e.shape.iter().product();
            if e.nbytes as usize != numel * T::DTYPE.size() {
                bail!(Format, "{name}: {} bytes for shape {:?}", e.nbytes, e.shape);
            }
            let Some(raw) = payload.get(e.offset as usize..(e.offset + e.nbytes) as usize) else {
                bail!(Format, "{name}: payload out of bounds");
            };
            expected_end = expected_end.max(e.offset + e.nbytes);
            let data = raw.chunks_exact(T::DTYPE.size()).map(T::read_le).collect();
            Tensor::new(&e.shape, data)
        };
        let cfg = &manifest.model;
        let params = Weights::build(cfg.n_layers, cfg.final_ln, manifest.has_head, |name| read(name))?;
        let model = Model::from_params(cfg.clone(), params)?;
        let optimizer = match &manifest.optimizer {
            None => None,
            Some(o) => {
                let m = o.params.iter().map(|n| read(&format!("adam.m.{n}"))).collect::<Result<Vec<_>>>()?;
                let v = o.params.iter().map(|n| read(&format!("adam.v.{n}"))).collect::<Result<Vec<_>>>()?;
                let hp = AdamWConfig {
                    beta1: o.beta1,
                    beta2: o.beta2,
                    eps: o.eps,
                    weight_decay: o.weight_decay,
                    clip_norm: o.clip_norm,
                };
                Some(OptimizerSnapshot { state: AdamW { hp, step: o.step, m, v }, params: o.params.clone() })
            }
        };
        if expected_end as usize != payload.len() {
            bail!(Format, "payload has {} bytes, manifest accounts for {expected_end}", payload.len());
        }
        Ok(Checkpoint {
            stage: manifest.stage,
            step: manifest.step,
            model,
            config_digest: manifest.config_digest,
            config: manifest.config,
            rng: manifest.rng,
            tokenizer: manifest.tokenizer,
            optimizer,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, bytes)?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)
            .map_err(|e| HlmError::Data(format!("cannot read checkpoint {}: {e}", path.display())))?;
        Self::from_bytes(&bytes)
    }
}
