//! Checkpoint container: a JSON manifest (architecture, sampling and
//! optimizer configuration, dataset descriptor, completed epochs, seed)
//! followed by raw little-endian `f64` blobs keyed by parameter name.
//! Saving and loading round-trip bit-exactly.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::model::{AetModel, NinConfig};
use crate::nn::SgdConfig;
use crate::xform::XformConfig;

use super::{DatasetSpec, TrainError};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"AETCKPT1";
pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BlobKind {
    Param,
    Momentum,
    Buffer,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlobInfo {
    pub name: String,
    pub kind: BlobKind,
    pub shape: Vec<usize>,
}

impl BlobInfo {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Everything needed to rebuild the model and continue training: the random
/// state is the pair (seed, epochs_completed) because every stochastic
/// stream is derived from them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub dataset: DatasetSpec,
    pub xform: XformConfig,
    pub nin: NinConfig,
    pub sgd: SgdConfig,
    pub bn_decay: bool,
    pub seed: u64,
    pub epochs_completed: usize,
    pub blobs: Vec<BlobInfo>,
}

/// A serialized model state: manifest plus blob payloads in manifest order.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub manifest: Manifest,
    pub blobs: Vec<(String, Vec<f64>)>,
}

impl Checkpoint {
    /// Captures model parameters, momentum buffers, and batch-norm running
    /// statistics.
    pub fn from_model(
        model: &AetModel,
        dataset: DatasetSpec,
        xform: XformConfig,
        sgd: SgdConfig,
        bn_decay: bool,
        seed: u64,
        epochs_completed: usize,
    ) -> Self {
        let mut infos = Vec::new();
        let mut blobs = Vec::new();
        for p in model.params.params() {
            infos.push(BlobInfo {
                name: p.name.clone(),
                kind: BlobKind::Param,
                shape: p.value.shape().to_vec(),
            });
            blobs.push((p.name.clone(), p.value.data().to_vec()));
        }
        for p in model.params.params() {
            let name = format!("{}#momentum", p.name);
            infos.push(BlobInfo {
                name: name.clone(),
                kind: BlobKind::Momentum,
                shape: p.momentum.shape().to_vec(),
            });
            blobs.push((name, p.momentum.data().to_vec()));
        }
        for b in model.params.buffers() {
            infos.push(BlobInfo {
                name: b.name.clone(),
                kind: BlobKind::Buffer,
                shape: b.value.shape().to_vec(),
            });
            blobs.push((b.name.clone(), b.value.data().to_vec()));
        }
        Self {
            manifest: Manifest {
                version: MANIFEST_VERSION,
                dataset,
                xform,
                nin: model.encoder.config().clone(),
                sgd,
                bn_decay,
                seed,
                epochs_completed,
                blobs: infos,
            },
            blobs,
        }
    }

    /// Rebuilds the model and overwrites its state from the blobs. Names
    /// must match the architecture exactly.
    pub fn build_model(&self) -> Result<AetModel, TrainError> {
        let mut model = AetModel::new(&self.manifest.nin, self.manifest.seed, self.manifest.bn_decay)
            .map_err(|e| TrainError::BadCheckpoint(e.to_string()))?;
        let lookup: std::collections::HashMap<&str, &Vec<f64>> = self
            .blobs
            .iter()
            .map(|(n, v)| (n.as_str(), v))
            .collect();
        for i in 0..model.params.len() {
            let name = model.params.param(i).name.clone();
            let value = lookup.get(name.as_str()).ok_or_else(|| {
                TrainError::ArchMismatch(format!("checkpoint is missing parameter {name}"))
            })?;
            if value.len() != model.params.param(i).value.numel() {
                return Err(TrainError::ArchMismatch(format!(
                    "parameter {name} has {} values, model expects {}",
                    value.len(),
                    model.params.param(i).value.numel()
                )));
            }
            model.params.param_mut(i).value.data_mut().copy_from_slice(value);
            let mname = format!("{name}#momentum");
            let mvalue = lookup.get(mname.as_str()).ok_or_else(|| {
                TrainError::ArchMismatch(format!("checkpoint is missing {mname}"))
            })?;
            model
                .params
                .param_mut(i)
                .momentum
                .data_mut()
                .copy_from_slice(mvalue);
        }
        for i in 0..model.params.buffers().len() {
            let name = model.params.buffer(i).name.clone();
            let value = lookup.get(name.as_str()).ok_or_else(|| {
                TrainError::ArchMismatch(format!("checkpoint is missing buffer {name}"))
            })?;
            model
                .params
                .buffer_mut(i)
                .value
                .data_mut()
                .copy_from_slice(value);
        }
        Ok(model)
    }

    /// Concatenated bytes of all encoder parameter blobs, for freeze checks.
    pub fn encoder_param_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for (name, values) in &self.blobs {
            if name.starts_with("enc.") && !name.contains('#') {
                for v in values {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<(), TrainError> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        let manifest = serde_json::to_vec(&self.manifest)?;
        let mut f = fs::File::create(path)?;
        f.write_all(CHECKPOINT_MAGIC)?;
        f.write_all(&(manifest.len() as u64).to_le_bytes())?;
        f.write_all(&manifest)?;
        debug_assert_eq!(self.manifest.blobs.len(), self.blobs.len());
        for ((name, values), info) in self.blobs.iter().zip(&self.manifest.blobs) {
            debug_assert_eq!(name, &info.name);
            for v in values {
                f.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, TrainError> {
        let mut f = fs::File::open(path)?;
        let mut magic = [0u8; 8];
        f.read_exact(&mut magic)
            .map_err(|_| TrainError::BadCheckpoint("file too short for magic".into()))?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(TrainError::BadCheckpoint(format!(
                "bad magic {magic:?} in {}",
                path.display()
            )));
        }
        let mut len_bytes = [0u8; 8];
        f.read_exact(&mut len_bytes)
            .map_err(|_| TrainError::BadCheckpoint("missing manifest length".into()))?;
        let manifest_len = u64::from_le_bytes(len_bytes) as usize;
        let mut manifest_bytes = vec![0u8; manifest_len];
        f.read_exact(&mut manifest_bytes)
            .map_err(|_| TrainError::BadCheckpoint("truncated manifest".into()))?;
        let manifest: Manifest = serde_json::from_slice(&manifest_bytes)?;
        if manifest.version != MANIFEST_VERSION {
            return Err(TrainError::BadCheckpoint(format!(
                "unsupported manifest version {}",
                manifest.version
            )));
        }
        let mut blobs = Vec::with_capacity(manifest.blobs.len());
        for info in &manifest.blobs {
            let mut raw = vec![0u8; info.len() * 8];
            f.read_exact(&mut raw).map_err(|_| {
                TrainError::BadCheckpoint(format!("truncated blob {}", info.name))
            })?;
            let values = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            blobs.push((info.name.clone(), values));
        }
        let mut trailing = Vec::new();
        f.read_to_end(&mut trailing)?;
        if !trailing.is_empty() {
            return Err(TrainError::BadCheckpoint(format!(
                "{} trailing bytes after blobs",
                trailing.len()
            )));
        }
        Ok(Self { manifest, blobs })
    }
}
