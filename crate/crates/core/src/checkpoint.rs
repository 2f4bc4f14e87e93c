//! Checkpoint file: `RFPCKPT1`, a little-endian `u64` header length, the JSON
//! header, then every tensor as little-endian `f32` in header order.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::{atomic_write, f32s_to_le_bytes, le_bytes_to_f32s, read_bytes};
use crate::error::{PoseError, Result};
use crate::model::{Model, ModelConfig};
use crate::params::{Component, ParamStore};
use crate::ssl::SslConfig;
use crate::train::Regime;
use rftensor::Tensor;

const MAGIC: &[u8; 8] = b"RFPCKPT1";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub byte_offset: u64,
    pub component: Component,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingMeta {
    pub regime: Regime,
    pub epoch: usize,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ssl: Option<SslConfig>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub model_config: ModelConfig,
    pub training_meta: TrainingMeta,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub params: ParamStore<f32>,
}

impl Checkpoint {
    pub fn components(&self) -> Vec<Component> {
        self.params.components()
    }

    /// Rebuilds the model that was saved, with every stored tensor loaded.
    pub fn to_model(&self) -> Result<Model<f32>> {
        let components = self.components();
        let mut model = Model::with_components(
            self.header.model_config.clone(),
            &components,
            self.header.training_meta.ssl.as_ref(),
            self.header.training_meta.seed,
        )?;
        if model.store.len() != self.params.len() {
            return Err(PoseError::WeightMismatch(vec![format!(
                "checkpoint holds {} tensors, its configuration defines {}",
                self.params.len(),
                model.store.len()
            )]));
        }
        model.store.load_from(&self.params, &components)?;
        Ok(model)
    }
}

pub fn encode(model: &Model<f32>, meta: &TrainingMeta) -> Result<Vec<u8>> {
    encode_store(&model.config, &model.store, meta)
}

pub fn encode_store(
    config: &ModelConfig,
    store: &ParamStore<f32>,
    meta: &TrainingMeta,
) -> Result<Vec<u8>> {
    let mut tensors = Vec::with_capacity(store.len());
    let mut offset = 0u64;
    for p in store.iter() {
        tensors.push(TensorEntry {
            name: p.name.clone(),
            shape: p.value.shape().to_vec(),
            byte_offset: offset,
            component: p.component,
        });
        offset += 4 * p.value.len() as u64;
    }
    let header = CheckpointHeader {
        format_version: FORMAT_VERSION,
        model_config: config.clone(),
        training_meta: meta.clone(),
        tensors,
    };
    let json = serde_json::to_vec(&header)
        .map_err(|e| PoseError::InvalidInput(format!("checkpoint header: {e}")))?;
    let mut out = Vec::with_capacity(16 + json.len() + offset as usize);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for p in store.iter() {
        out.extend(f32s_to_le_bytes(p.value.data()));
    }
    Ok(out)
}

pub fn save(path: &Path, model: &Model<f32>, meta: &TrainingMeta) -> Result<()> {
    atomic_write(path, &encode(model, meta)?)
}

pub fn save_store(
    path: &Path,
    config: &ModelConfig,
    store: &ParamStore<f32>,
    meta: &TrainingMeta,
) -> Result<()> {
    atomic_write(path, &encode_store(config, store, meta)?)
}

pub fn decode(path: &Path, bytes: &[u8]) -> Result<Checkpoint> {
    let bad = |reason: String| PoseError::format(path, reason);
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(bad("not a checkpoint file".into()));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let blob_start = 16usize
        .checked_add(header_len)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| bad("truncated header".into()))?;
    let header: CheckpointHeader =
        serde_json::from_slice(&bytes[16..blob_start]).map_err(|e| bad(format!("header: {e}")))?;
    if header.format_version != FORMAT_VERSION {
        return Err(bad(format!(
            "unsupported format version {}",
            header.format_version
        )));
    }
    let blob = &bytes[blob_start..];
    let mut params = ParamStore::new();
    let mut expected = 0u64;
    for t in &header.tensors {
        if t.byte_offset != expected {
            return Err(bad(format!(
                "tensor {} at offset {}, expected {expected}",
                t.name, t.byte_offset
            )));
        }
        let len: usize = t.shape.iter().product();
        let end = expected as usize + 4 * len;
        if end > blob.len() {
            return Err(bad(format!(
                "tensor {} extends past the end of the file",
                t.name
            )));
        }
        if params.id(&t.name).is_some() {
            return Err(bad(format!("tensor {} appears twice", t.name)));
        }
        let values = le_bytes_to_f32s(&blob[expected as usize..end]);
        params.add(&t.name, t.component, Tensor::new(&t.shape, values)?);
        expected = end as u64;
    }
    if expected as usize != blob.len() {
        return Err(bad(format!(
            "{} trailing bytes after the last tensor",
            blob.len() - expected as usize
        )));
    }
    Ok(Checkpoint { header, params })
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    decode(path, &read_bytes(path)?)
}

/// Loads only the tensors tagged with `components` into `model`.
pub fn load_checkpoint_subset(
    ckpt: &Checkpoint,
    components: &[Component],
    model: &mut Model<f32>,
) -> Result<usize> {
    model.store.load_from(&ckpt.params, components)
}
