//! Binary checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! offset  size  field
//! 0       8     magic "GMCONVCK"
//! 8       4     format version (u32)
//! 12      8     index length in bytes (u64)
//! 20      n     JSON index (UTF-8)
//! 20+n    ...   tensor blob: f64 values, little-endian, back to back
//! ```
//!
//! The index holds the model spec, the epoch, the generator state, the
//! metric history, the optional training config and one entry per tensor
//! (`name`, `shape`, byte `offset` into the blob). Parameters come first in
//! model order, then the momentum buffers named `velocity/<param>`.

use std::fs;
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Model;
use crate::tensor::Tensor;
use crate::train::{EpochMetrics, TrainConfig};
use crate::zoo::ModelSpec;

pub const MAGIC: &[u8; 8] = b"GMCONVCK";
pub const VERSION: u32 = 1;
const HEADER: usize = 20;
const VELOCITY_PREFIX: &str = "velocity/";

/// Serializable ChaCha8 position.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    /// 32-byte key as lowercase hex.
    pub seed: String,
    pub stream: u64,
    /// 128-bit word position as a decimal string.
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        let seed = rng.get_seed().iter().map(|b| format!("{b:02x}")).collect();
        Self { seed, stream: rng.get_stream(), word_pos: rng.get_word_pos().to_string() }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        use rand::SeedableRng;
        let bad = |what: &str| Error::Checkpoint(format!("invalid rng {what}"));
        if self.seed.len() != 64 || !self.seed.is_ascii() {
            return Err(bad("seed"));
        }
        let mut key = [0u8; 32];
        for (i, k) in key.iter_mut().enumerate() {
            *k = u8::from_str_radix(&self.seed[2 * i..2 * i + 2], 16).map_err(|_| bad("seed"))?;
        }
        let mut rng = ChaCha8Rng::from_seed(key);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos.parse().map_err(|_| bad("word position"))?);
        Ok(rng)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Index {
    spec: ModelSpec,
    epoch: usize,
    rng: RngState,
    history: Vec<EpochMetrics>,
    config: Option<TrainConfig>,
    tensors: Vec<TensorEntry>,
}

/// Everything needed to evaluate a model or resume its training.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    /// Momentum buffers in parameter order; empty when not training.
    pub velocity: Vec<Tensor>,
    /// Completed epochs.
    pub epoch: usize,
    pub rng: RngState,
    pub history: Vec<EpochMetrics>,
    pub config: Option<TrainConfig>,
}

impl Checkpoint {
    /// A checkpoint with no optimizer state.
    pub fn from_model(model: Model, rng: &ChaCha8Rng) -> Self {
        Self { model, velocity: Vec::new(), epoch: 0, rng: RngState::capture(rng), history: Vec::new(), config: None }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let params = self.model.params();
        if !self.velocity.is_empty() && self.velocity.len() != params.len() {
            return Err(Error::Checkpoint(format!(
                "{} momentum buffers for {} parameters",
                self.velocity.len(),
                params.len()
            )));
        }
        let named = params
            .iter()
            .map(|p| (p.name.clone(), &p.value))
            .chain(params.iter().zip(&self.velocity).map(|(p, v)| (format!("{VELOCITY_PREFIX}{}", p.name), v)));
        let mut tensors = Vec::new();
        let mut blob = Vec::new();
        for (name, t) in named {
            tensors.push(TensorEntry { name, shape: t.shape().to_vec(), offset: blob.len() as u64 });
            for v in t.data() {
                blob.extend_from_slice(&v.to_le_bytes());
            }
        }
        let index = Index {
            spec: self.model.spec().clone(),
            epoch: self.epoch,
            rng: self.rng.clone(),
            history: self.history.clone(),
            config: self.config.clone(),
            tensors,
        };
        let json = serde_json::to_vec(&index)?;
        let mut out = Vec::with_capacity(HEADER + json.len() + blob.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&blob);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: String| Error::Checkpoint(m);
        if bytes.len() < HEADER || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint file (bad magic)".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != VERSION {
            return Err(bad(format!("unsupported checkpoint version {version}")));
        }
        let index_len = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let blob_start = HEADER
            .checked_add(index_len)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| bad(format!("index of {index_len} bytes overruns a {}-byte file", bytes.len())))?;
        let index: Index = serde_json::from_slice(&bytes[HEADER..blob_start])?;
        let blob = &bytes[blob_start..];

        let mut expected_offset = 0u64;
        let mut tensors = Vec::with_capacity(index.tensors.len());
        for e in &index.tensors {
            let n: usize = e.shape.iter().product();
            if e.offset != expected_offset {
                return Err(bad(format!("tensor {} at offset {}, expected {expected_offset}", e.name, e.offset)));
            }
            let start = e.offset as usize;
            let end = start + 8 * n;
            if end > blob.len() {
                return Err(bad(format!("tensor {} runs past the end of the blob", e.name)));
            }
            let data = blob[start..end].chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().unwrap())).collect();
            tensors.push((e.name.clone(), Tensor::new(&e.shape, data)?));
            expected_offset = end as u64;
        }
        if expected_offset as usize != blob.len() {
            return Err(bad(format!("{} trailing bytes after the last tensor", blob.len() - expected_offset as usize)));
        }
        let split = tensors.iter().position(|(n, _)| n.starts_with(VELOCITY_PREFIX)).unwrap_or(tensors.len());
        let velocity_named = tensors.split_off(split);
        let model = Model::from_parts(index.spec, tensors)?;
        if !velocity_named.is_empty() && velocity_named.len() != model.params().len() {
            return Err(bad("momentum buffers do not cover every parameter".into()));
        }
        let mut velocity = Vec::with_capacity(velocity_named.len());
        for (p, (name, v)) in model.params().iter().zip(velocity_named) {
            if name.strip_prefix(VELOCITY_PREFIX) != Some(p.name.as_str()) || v.shape() != p.value.shape() {
                return Err(bad(format!("momentum buffer {name} does not match parameter {}", p.name)));
            }
            velocity.push(v);
        }
        Ok(Self { model, velocity, epoch: index.epoch, rng: index.rng, history: index.history, config: index.config })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path).map_err(|e| Error::io(path, e))?)
    }
}
