//! Single-file checkpoint container.
//!
//! Layout: 8-byte magic, u64 manifest length, JSON manifest, then the raw
//! little-endian f64 payloads at the offsets the manifest records. Save,
//! load, save again is byte-identical; corrupted payloads and version
//! mismatches refuse to load.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::TrainError;
use crate::adapters::{AdapterPair, EmbeddingBank, UserEmbedding};
use crate::backbone::Backbone;
use crate::config::ExperimentConfig;
use crate::fileio::fnv1a64;
use crate::tensor::{AdamParams, AdamState, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"PMCKPT\0\0";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct MetricPoint {
    pub step: u64,
    pub name: String,
    pub value: f64,
}

/// Full persisted training state.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: ExperimentConfig,
    pub stage: u8,
    pub step: u64,
    pub backbone: Backbone,
    pub adapters: Option<AdapterPair>,
    pub bank: Option<EmbeddingBank>,
    pub optimizer: AdamState,
    pub rng_state: [u64; 4],
    pub metrics: Vec<MetricPoint>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    shape: Vec<usize>,
    offset: u64,
    checksum: u64,
}

#[derive(Serialize, Deserialize)]
struct MomentEntry {
    t: u64,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    version: u32,
    config_fingerprint: String,
    config: ExperimentConfig,
    stage: u8,
    step: u64,
    rng_state: [u64; 4],
    adam: AdamParams,
    adam_step: u64,
    /// Per-parameter moment step counts; the moment vectors live in the
    /// payload under `optim.m.*` / `optim.v.*`.
    moment_steps: BTreeMap<String, MomentEntry>,
    bank_user_ids: Option<Vec<u32>>,
    has_adapters: bool,
    metrics: Vec<MetricPoint>,
    tensors: BTreeMap<String, TensorEntry>,
}

impl Checkpoint {
    pub fn fingerprint(&self) -> String {
        self.config.fingerprint()
    }

    /// All persisted tensors by name.
    fn tensor_map(&self) -> BTreeMap<String, Tensor> {
        let mut map = BTreeMap::new();
        let mut items = Vec::new();
        self.backbone.for_each_param(&mut items);
        for (name, t) in items.drain(..) {
            map.insert(format!("backbone.{name}"), t.clone());
        }
        if let Some(adapters) = &self.adapters {
            adapters.for_each_param(&mut items);
            for (name, t) in items.drain(..) {
                map.insert(format!("adapter.{name}"), t.clone());
            }
        }
        if let Some(bank) = &self.bank {
            bank.for_each_param(&mut items);
            for (name, t) in items.drain(..) {
                map.insert(format!("bank.{name}"), t.clone());
            }
        }
        for (name, _, m, v) in self.optimizer.moment_entries() {
            map.insert(
                format!("optim.m.{name}"),
                Tensor::new(vec![m.len()], m.to_vec()).unwrap(),
            );
            map.insert(
                format!("optim.v.{name}"),
                Tensor::new(vec![v.len()], v.to_vec()).unwrap(),
            );
        }
        map
    }

    pub fn save(&self, path: &Path) -> Result<(), TrainError> {
        let tensors = self.tensor_map();
        let mut entries = BTreeMap::new();
        let mut payload = Vec::new();
        for (name, t) in &tensors {
            let offset = payload.len() as u64;
            let mut bytes = Vec::with_capacity(t.numel() * 8);
            for v in t.data() {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
            entries.insert(
                name.clone(),
                TensorEntry {
                    shape: t.shape().to_vec(),
                    offset,
                    checksum: fnv1a64(&bytes),
                },
            );
            payload.extend_from_slice(&bytes);
        }
        let manifest = Manifest {
            version: CHECKPOINT_VERSION,
            config_fingerprint: self.config.fingerprint(),
            config: self.config.clone(),
            stage: self.stage,
            step: self.step,
            rng_state: self.rng_state,
            adam: self.optimizer.params,
            adam_step: self.optimizer.step_count(),
            moment_steps: self
                .optimizer
                .moment_entries()
                .map(|(name, t, _, _)| (name.to_string(), MomentEntry { t }))
                .collect(),
            bank_user_ids: self
                .bank
                .as_ref()
                .map(|b| b.embeddings.iter().map(|e| e.user_id).collect()),
            has_adapters: self.adapters.is_some(),
            metrics: self.metrics.clone(),
            tensors: entries,
        };
        let manifest_bytes =
            serde_json::to_vec(&manifest).map_err(|e| TrainError::Checkpoint(e.to_string()))?;

        let mut out = Vec::with_capacity(16 + manifest_bytes.len() + payload.len());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&(manifest_bytes.len() as u64).to_le_bytes());
        out.extend_from_slice(&manifest_bytes);
        out.extend_from_slice(&payload);

        // atomic write: temp file, then rename into place
        let tmp = path.with_extension("tmp");
        {
            let mut file = std::fs::File::create(&tmp).map_err(|e| TrainError::Io {
                path: tmp.display().to_string(),
                source: e,
            })?;
            file.write_all(&out).map_err(|e| TrainError::Io {
                path: tmp.display().to_string(),
                source: e,
            })?;
            file.sync_all().map_err(|e| TrainError::Io {
                path: tmp.display().to_string(),
                source: e,
            })?;
        }
        std::fs::rename(&tmp, path).map_err(|e| TrainError::Io {
            path: path.display().to_string(),
            source: e,
        })
    }

    pub fn load(path: &Path) -> Result<Checkpoint, TrainError> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| TrainError::Io {
                path: path.display().to_string(),
                source: e,
            })?;
        if bytes.len() < 16 || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(TrainError::Checkpoint(format!(
                "{}: not a checkpoint file",
                path.display()
            )));
        }
        let manifest_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        if bytes.len() < 16 + manifest_len {
            return Err(TrainError::Checkpoint("truncated manifest".into()));
        }
        let manifest: Manifest = serde_json::from_slice(&bytes[16..16 + manifest_len])
            .map_err(|e| TrainError::Checkpoint(format!("manifest: {e}")))?;
        if manifest.version != CHECKPOINT_VERSION {
            return Err(TrainError::CheckpointVersion {
                found: manifest.version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let payload = &bytes[16 + manifest_len..];

        let mut tensors: BTreeMap<String, Tensor> = BTreeMap::new();
        for (name, entry) in &manifest.tensors {
            let numel: usize = entry.shape.iter().product();
            let start = entry.offset as usize;
            let end = start + numel * 8;
            if payload.len() < end {
                return Err(TrainError::Checkpoint(format!("tensor '{name}' truncated")));
            }
            let slice = &payload[start..end];
            if fnv1a64(slice) != entry.checksum {
                return Err(TrainError::Checkpoint(format!(
                    "tensor '{name}' failed its checksum; file is corrupt"
                )));
            }
            let data: Vec<f64> = slice
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            tensors.insert(
                name.clone(),
                Tensor::new(entry.shape.clone(), data)
                    .map_err(|e| TrainError::Checkpoint(format!("tensor '{name}': {e}")))?,
            );
        }

        let take = |tensors: &BTreeMap<String, Tensor>, name: &str| -> Result<Tensor, TrainError> {
            tensors
                .get(name)
                .cloned()
                .ok_or_else(|| TrainError::Checkpoint(format!("missing tensor '{name}'")))
        };

        let skeleton = Backbone::init(&manifest.config.backbone, 0);
        let backbone = skeleton
            .map_params(&mut |name, _| {
                take(&tensors, &format!("backbone.{name}")).map_err(|e| {
                    crate::tensor::TensorError::Invalid {
                        op: "checkpoint",
                        msg: e.to_string(),
                    }
                })
            })
            .map_err(|e| TrainError::Checkpoint(e.to_string()))?;

        let adapters = if manifest.has_adapters {
            let skeleton = AdapterPair::init(
                &manifest.config.adapter,
                manifest.config.backbone.d_model,
                manifest.config.backbone.d_mod,
                manifest.config.backbone.blocks,
                0,
            );
            Some(
                skeleton
                    .map_params(&mut |name, _| {
                        take(&tensors, &format!("adapter.{name}")).map_err(|e| {
                            crate::tensor::TensorError::Invalid {
                                op: "checkpoint",
                                msg: e.to_string(),
                            }
                        })
                    })
                    .map_err(|e| TrainError::Checkpoint(e.to_string()))?,
            )
        } else {
            None
        };

        let bank = match &manifest.bank_user_ids {
            None => None,
            Some(ids) => {
                let mut embeddings = Vec::with_capacity(ids.len());
                for &id in ids {
                    embeddings.push(UserEmbedding {
                        user_id: id,
                        matrix: take(&tensors, &format!("bank.user{id:04}"))?,
                    });
                }
                Some(EmbeddingBank { embeddings })
            }
        };

        let mut moment_parts = Vec::new();
        for (name, entry) in &manifest.moment_steps {
            let m = take(&tensors, &format!("optim.m.{name}"))?;
            let v = take(&tensors, &format!("optim.v.{name}"))?;
            moment_parts.push((name.clone(), entry.t, m.data().to_vec(), v.data().to_vec()));
        }
        let optimizer = AdamState::restore(manifest.adam, manifest.adam_step, moment_parts);

        Ok(Checkpoint {
            config: manifest.config,
            stage: manifest.stage,
            step: manifest.step,
            backbone,
            adapters,
            bank,
            optimizer,
            rng_state: manifest.rng_state,
            metrics: manifest.metrics,
        })
    }
}

/// Standalone per-user embedding export: a JSON manifest next to a raw
/// tensor file, so one user's preference ships without the bank.
pub fn export_user_embedding(
    dir: &Path,
    embedding: &UserEmbedding,
    alpha: Option<&Tensor>,
    config_fingerprint: &str,
) -> Result<(), TrainError> {
    std::fs::create_dir_all(dir).map_err(|e| TrainError::Io {
        path: dir.display().to_string(),
        source: e,
    })?;
    let tensor_file = format!("user{:04}.ten", embedding.user_id);
    crate::fileio::write_tensor(&dir.join(&tensor_file), &embedding.matrix)
        .map_err(|e| TrainError::Checkpoint(e.to_string()))?;
    let alpha_file = match alpha {
        Some(a) => {
            let name = format!("user{:04}.alpha.ten", embedding.user_id);
            crate::fileio::write_tensor(&dir.join(&name), a)
                .map_err(|e| TrainError::Checkpoint(e.to_string()))?;
            Some(name)
        }
        None => None,
    };
    let manifest = serde_json::json!({
        "user_id": embedding.user_id,
        "shape": embedding.matrix.shape(),
        "tensor_file": tensor_file,
        "alpha_file": alpha_file,
        "config_fingerprint": config_fingerprint,
    });
    let path = dir.join(format!("user{:04}.json", embedding.user_id));
    std::fs::write(&path, serde_json::to_string_pretty(&manifest).unwrap()).map_err(|e| {
        TrainError::Io {
            path: path.display().to_string(),
            source: e,
        }
    })
}

pub fn import_user_embedding(dir: &Path, user_id: u32) -> Result<(UserEmbedding, Option<Tensor>), TrainError> {
    let manifest_path = dir.join(format!("user{user_id:04}.json"));
    let raw = std::fs::read_to_string(&manifest_path).map_err(|e| TrainError::Io {
        path: manifest_path.display().to_string(),
        source: e,
    })?;
    let manifest: serde_json::Value =
        serde_json::from_str(&raw).map_err(|e| TrainError::Checkpoint(e.to_string()))?;
    let tensor_file = manifest["tensor_file"]
        .as_str()
        .ok_or_else(|| TrainError::Checkpoint("export manifest missing tensor_file".into()))?;
    let matrix = crate::fileio::read_tensor(&dir.join(tensor_file))
        .map_err(|e| TrainError::Checkpoint(e.to_string()))?;
    let alpha = match manifest["alpha_file"].as_str() {
        Some(name) => Some(
            crate::fileio::read_tensor(&dir.join(name))
                .map_err(|e| TrainError::Checkpoint(e.to_string()))?,
        ),
        None => None,
    };
    Ok((UserEmbedding { user_id, matrix }, alpha))
}
