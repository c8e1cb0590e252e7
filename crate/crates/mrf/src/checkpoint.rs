//! Named-tensor checkpoint store.
//!
//! On disk a checkpoint is a directory holding `manifest.json` (format
//! version, model config, optional MoE config, ordered tensor index with
//! name/shape/byte-offset) and `weights.bin` (little-endian `f64` values
//! concatenated in index order). Round-trips are bit-exact. A frozen
//! checkpoint rejects every mutation until thawed.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::moe::MoEConfig;
use crate::tensor::Tensor;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug)]
pub struct Checkpoint {
    config: ModelConfig,
    moe: Option<MoEConfig>,
    frozen: bool,
    tensors: BTreeMap<String, Tensor>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    frozen: bool,
    config: ModelConfig,
    moe: Option<MoEConfig>,
    tensors: Vec<TensorEntry>,
}

impl Checkpoint {
    pub fn new_dense(config: ModelConfig) -> Self {
        Checkpoint { config, moe: None, frozen: false, tensors: BTreeMap::new() }
    }

    pub fn new_moe(config: ModelConfig, moe: MoEConfig) -> Self {
        Checkpoint { config, moe: Some(moe), frozen: false, tensors: BTreeMap::new() }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn moe_config(&self) -> Option<&MoEConfig> {
        self.moe.as_ref()
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn thaw(&mut self) {
        self.frozen = false;
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) -> Result<()> {
        if self.frozen {
            return Err(Error::CheckpointFrozen);
        }
        self.tensors.insert(name.into(), t);
        Ok(())
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        self.tensors.get(name).ok_or_else(|| Error::UnknownTensor(name.to_string()))
    }

    pub fn tensor_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        if self.frozen {
            return Err(Error::CheckpointFrozen);
        }
        self.tensors.get_mut(name).ok_or_else(|| Error::UnknownTensor(name.to_string()))
    }

    pub fn has_tensor(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    /// Name-sorted iteration (BTreeMap order == on-disk index order).
    pub fn tensors(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn param_count(&self) -> usize {
        self.tensors.values().map(|t| t.numel()).sum()
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut entries = Vec::with_capacity(self.tensors.len());
        let mut blob: Vec<u8> = Vec::new();
        for (name, t) in &self.tensors {
            entries.push(TensorEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                offset: blob.len() as u64,
            });
            for v in t.data() {
                blob.extend_from_slice(&v.to_le_bytes());
            }
        }
        let manifest = Manifest {
            format_version: FORMAT_VERSION,
            frozen: self.frozen,
            config: self.config.clone(),
            moe: self.moe.clone(),
            tensors: entries,
        };
        let mpath = dir.join("manifest.json");
        let json = serde_json::to_string_pretty(&manifest)
            .map_err(|e| Error::Invalid(format!("manifest serialization: {e}")))?;
        fs::write(&mpath, json).map_err(|e| Error::io(&mpath, e))?;
        let bpath = dir.join("weights.bin");
        fs::write(&bpath, blob).map_err(|e| Error::io(&bpath, e))?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Checkpoint> {
        let mpath = dir.join("manifest.json");
        let json = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
        let manifest: Manifest = serde_json::from_str(&json)
            .map_err(|e| Error::CheckpointCorrupt(format!("manifest parse: {e}")))?;
        if manifest.format_version != FORMAT_VERSION {
            return Err(Error::CheckpointVersion {
                found: manifest.format_version,
                expected: FORMAT_VERSION,
            });
        }
        let bpath = dir.join("weights.bin");
        let blob = fs::read(&bpath).map_err(|e| Error::io(&bpath, e))?;

        let mut tensors = BTreeMap::new();
        let mut expected_offset: u64 = 0;
        for entry in &manifest.tensors {
            if entry.offset != expected_offset {
                return Err(Error::CheckpointCorrupt(format!(
                    "tensor '{}' offset {} does not match cumulative shape sizes ({})",
                    entry.name, entry.offset, expected_offset
                )));
            }
            let numel: usize = entry.shape.iter().product();
            let nbytes = numel as u64 * 8;
            let start = entry.offset as usize;
            let end = start + nbytes as usize;
            if end > blob.len() {
                return Err(Error::CheckpointCorrupt(format!(
                    "blob truncated or shape mismatch: tensor '{}' needs bytes {}..{} but blob has {}",
                    entry.name, start, end, blob.len()
                )));
            }
            let data: Vec<f64> = blob[start..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            tensors.insert(entry.name.clone(), Tensor::new(entry.shape.clone(), data));
            expected_offset += nbytes;
        }
        if expected_offset != blob.len() as u64 {
            return Err(Error::CheckpointCorrupt(format!(
                "shape mismatch: manifest declares {} bytes but blob has {}",
                expected_offset,
                blob.len()
            )));
        }
        Ok(Checkpoint {
            config: manifest.config,
            moe: manifest.moe,
            frozen: manifest.frozen,
            tensors,
        })
    }

    /// Bitwise equality of configs and every tensor.
    pub fn bit_identical(&self, other: &Checkpoint) -> bool {
        if self.config != other.config || self.moe != other.moe {
            return false;
        }
        if self.tensors.len() != other.tensors.len() {
            return false;
        }
        self.tensors.iter().all(|(name, t)| {
            other.tensors.get(name).map(|o| {
                o.shape() == t.shape()
                    && o.data().iter().zip(t.data()).all(|(a, b)| a.to_bits() == b.to_bits())
            }) == Some(true)
        })
    }
}
