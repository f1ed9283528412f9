//! Binary checkpoint container.
//!
//! Layout: the 8-byte magic `TINCCKPT`, a little-endian u64 header length,
//! a JSON header, then raw little-endian f64 blobs. Every blob is named in
//! the header with its shape and byte offset from the start of the blob
//! section.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{StepStats, TrainConfig};
use crate::error::{Result, TincError};
use crate::nn::{Model, ModelConfig};
use crate::optim::AdamState;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"TINCCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Position of the training stream; batches are drawn from seed-derived
/// streams, so this is all that is needed to continue the sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub epoch: u64,
    pub batch: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub step: u64,
    pub train_config: TrainConfig,
    pub model: Model,
    pub adam: AdamState,
    pub rng: RngState,
    /// Steps already taken in the unfinished epoch.
    pub partial_epoch: Vec<StepStats>,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    dtype: String,
    offset: u64,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format_version: u32,
    step: u64,
    train_config: TrainConfig,
    model_config: ModelConfig,
    rng_state: RngState,
    partial_epoch: Vec<StepStats>,
    tensors: Vec<TensorEntry>,
}

fn incompatible(msg: impl Into<String>) -> TincError {
    TincError::IncompatibleCheckpoint(msg.into())
}

impl Checkpoint {
    /// Named tensors in storage order: parameters, running statistics, then
    /// the two optimiser moments.
    fn named_tensors(&self) -> Vec<(String, Vec<usize>, &[f64])> {
        let mut out = Vec::new();
        for (spec, p) in self.model.specs().iter().zip(&self.model.params) {
            out.push((spec.name.clone(), spec.shape.clone(), p.as_slice()));
        }
        for (spec, r) in self.model.running_specs().iter().zip(&self.model.running) {
            out.push((spec.name.clone(), spec.shape.clone(), r.as_slice()));
        }
        for (prefix, moments) in [("adam.m.", &self.adam.m), ("adam.v.", &self.adam.v)] {
            for (spec, m) in self.model.specs().iter().zip(moments) {
                out.push((format!("{prefix}{}", spec.name), spec.shape.clone(), m.as_slice()));
            }
        }
        out
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut blobs = Vec::new();
        let mut tensors = Vec::new();
        for (name, shape, data) in self.named_tensors() {
            tensors.push(TensorEntry {
                name,
                shape,
                dtype: "f64".into(),
                offset: blobs.len() as u64,
            });
            for v in data {
                blobs.extend_from_slice(&v.to_le_bytes());
            }
        }
        let header = Header {
            format_version: CHECKPOINT_VERSION,
            step: self.step,
            train_config: self.train_config.clone(),
            model_config: self.model.config().clone(),
            rng_state: self.rng,
            partial_epoch: self.partial_epoch.clone(),
            tensors,
        };
        let json = serde_json::to_vec(&header).map_err(|e| incompatible(e.to_string()))?;
        let mut out = Vec::with_capacity(16 + json.len() + blobs.len());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&blobs);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(incompatible("missing checkpoint magic"));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let json = bytes.get(16..16 + hlen).ok_or_else(|| incompatible("truncated header"))?;
        let header: Header = serde_json::from_slice(json).map_err(|e| incompatible(format!("bad header: {e}")))?;
        if header.format_version != CHECKPOINT_VERSION {
            return Err(incompatible(format!(
                "format version {} (expected {CHECKPOINT_VERSION})",
                header.format_version
            )));
        }
        let blobs = &bytes[16 + hlen..];
        let mut model = Model::new(header.model_config.clone(), 0)?;
        let mut adam = AdamState::new(&model.params);
        adam.step = header.step;

        let mut entries = header.tensors.iter();
        let mut fill = |expected_name: &str, expected_shape: &[usize], dst: &mut Vec<f64>| -> Result<()> {
            let e = entries
                .next()
                .ok_or_else(|| incompatible(format!("tensor {expected_name} missing")))?;
            if e.name != expected_name || e.shape != expected_shape || e.dtype != "f64" {
                return Err(incompatible(format!(
                    "expected {expected_name} {expected_shape:?} f64, found {} {:?} {}",
                    e.name, e.shape, e.dtype
                )));
            }
            let n: usize = e.shape.iter().product();
            let start = e.offset as usize;
            let raw = blobs
                .get(start..start + 8 * n)
                .ok_or_else(|| incompatible(format!("blob of {} out of bounds", e.name)))?;
            *dst = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            Ok(())
        };
        let specs = model.specs().to_vec();
        for (spec, p) in specs.iter().zip(model.params.iter_mut()) {
            fill(&spec.name, &spec.shape, p)?;
        }
        for (spec, r) in model.running_specs().iter().zip(model.running.iter_mut()) {
            fill(&spec.name, &spec.shape, r)?;
        }
        for (spec, m) in specs.iter().zip(adam.m.iter_mut()) {
            fill(&format!("adam.m.{}", spec.name), &spec.shape, m)?;
        }
        for (spec, v) in specs.iter().zip(adam.v.iter_mut()) {
            fill(&format!("adam.v.{}", spec.name), &spec.shape, v)?;
        }
        if entries.next().is_some() {
            return Err(incompatible("unexpected extra tensors"));
        }
        Ok(Checkpoint {
            step: header.step,
            train_config: header.train_config,
            model,
            adam,
            rng: header.rng_state,
            partial_epoch: header.partial_epoch,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        // Write then rename so a crash never leaves a torn checkpoint.
        let tmp = path.with_extension("bin.tmp");
        fs::write(&tmp, bytes).map_err(|e| TincError::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| TincError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| TincError::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            TincError::IncompatibleCheckpoint(m) => incompatible(format!("{}: {m}", path.display())),
            other => other,
        })
    }
}
