//! Checkpoint container.
//!
//! ```text
//! magic "SKPCKPT\0" | version u8 | payload_len u64 LE | payload | sha256(payload)
//! payload = header_len u32 LE | JSON header | parameters and buffers as f64 LE
//! ```
//!
//! The header carries the model config, fitted pipeline, embedding reference,
//! training metadata and a manifest of `(name, rows, cols)` in storage order.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::features::{FeaturePipeline, TrackCatalog};
use crate::glove::{file_sha256, TrackEmbeddings};
use crate::net::{ModelConfig, ModelParams};
use crate::scalar::Scalar;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"SKPCKPT\0";
pub const CHECKPOINT_VERSION: u8 = 1;
const PREFIX_LEN: usize = 8 + 1 + 8;
const HASH_LEN: usize = 32;

/// Pretrained embedding file a model was trained against.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EmbeddingRef {
    pub path: PathBuf,
    pub sha256: String,
}

impl EmbeddingRef {
    pub fn of_file(path: &Path) -> Result<Self> {
        Ok(Self {
            path: path.to_path_buf(),
            sha256: file_sha256(path)?,
        })
    }

    /// Loads the file after checking its content hash.
    pub fn load(&self) -> Result<TrackEmbeddings> {
        if file_sha256(&self.path)? != self.sha256 {
            return Err(Error::EmbeddingHash {
                path: self.path.clone(),
            });
        }
        TrackEmbeddings::load(&self.path)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub valid_mean_aa: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// 1-based epoch whose parameters were kept; 0 for the initialization.
    pub best_epoch: usize,
    pub best_valid_mean_aa: Option<f64>,
    pub final_loss: Option<f64>,
    pub history: Vec<EpochLog>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<T> {
    pub params: ModelParams<T>,
    pub pipeline: FeaturePipeline,
    pub embedding: Option<EmbeddingRef>,
    pub meta: TrainingMeta,
}

#[derive(Debug, PartialEq, Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    scalar: String,
    config: ModelConfig,
    pipeline: FeaturePipeline,
    embedding: Option<EmbeddingRef>,
    meta: TrainingMeta,
    manifest: Vec<ManifestEntry>,
}

fn manifest<T: Scalar>(params: &ModelParams<T>) -> Vec<ManifestEntry> {
    let weights = params
        .named_params()
        .into_iter()
        .map(|(name, m)| ManifestEntry {
            name,
            rows: m.rows(),
            cols: m.cols(),
        });
    let buffers = params
        .named_buffers()
        .into_iter()
        .map(|(name, v)| ManifestEntry {
            name,
            rows: 1,
            cols: v.len(),
        });
    weights.chain(buffers).collect()
}

impl<T: Scalar> Checkpoint<T> {
    /// Catalog with this checkpoint's embeddings, verified against the stored hash.
    pub fn catalog(&self, tracks: crate::dataset::TrackTable) -> Result<TrackCatalog> {
        let embeddings = self
            .embedding
            .as_ref()
            .map(EmbeddingRef::load)
            .transpose()?;
        Ok(TrackCatalog::new(tracks, embeddings))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            scalar: T::NAME.to_string(),
            config: self.params.config.clone(),
            pipeline: self.pipeline.clone(),
            embedding: self.embedding.clone(),
            meta: self.meta.clone(),
            manifest: manifest(&self.params),
        };
        let json = serde_json::to_vec(&header)?;
        let mut payload = Vec::with_capacity(4 + json.len() + 8 * self.params.num_scalars());
        payload.extend_from_slice(&(json.len() as u32).to_le_bytes());
        payload.extend_from_slice(&json);
        let values = self
            .params
            .named_params()
            .into_iter()
            .flat_map(|(_, m)| m.data().to_vec())
            .chain(
                self.params
                    .named_buffers()
                    .into_iter()
                    .flat_map(|(_, v)| v.clone()),
            );
        for x in values {
            payload.extend_from_slice(&x.as_f64().to_le_bytes());
        }
        let mut out = Vec::with_capacity(PREFIX_LEN + payload.len() + HASH_LEN);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.push(CHECKPOINT_VERSION);
        out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
        out.extend_from_slice(&payload);
        out.extend_from_slice(&Sha256::digest(&payload));
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < PREFIX_LEN {
            return Err(Error::CheckpointTruncated {
                expected: PREFIX_LEN as u64,
                found: bytes.len() as u64,
            });
        }
        if &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(Error::CheckpointIntegrity(
                "not a checkpoint file (bad magic)".into(),
            ));
        }
        if bytes[8] != CHECKPOINT_VERSION {
            return Err(Error::CheckpointVersion {
                found: bytes[8],
                expected: CHECKPOINT_VERSION,
            });
        }
        let payload_len = u64::from_le_bytes(bytes[9..17].try_into().expect("8 bytes"));
        let expected = (PREFIX_LEN as u64)
            .saturating_add(payload_len)
            .saturating_add(HASH_LEN as u64);
        if (bytes.len() as u64) < expected {
            return Err(Error::CheckpointTruncated {
                expected,
                found: bytes.len() as u64,
            });
        }
        if bytes.len() as u64 > expected {
            return Err(Error::CheckpointIntegrity(format!(
                "{} trailing bytes after the checksum",
                bytes.len() as u64 - expected
            )));
        }
        let payload = &bytes[PREFIX_LEN..PREFIX_LEN + payload_len as usize];
        let stored_hash = &bytes[PREFIX_LEN + payload_len as usize..];
        if Sha256::digest(payload).as_slice() != stored_hash {
            return Err(Error::CheckpointIntegrity(
                "payload checksum mismatch".into(),
            ));
        }
        let corrupt = |msg: &str| Error::CheckpointIntegrity(msg.to_string());
        let header_len = u32::from_le_bytes(
            payload
                .get(..4)
                .ok_or_else(|| corrupt("payload too short for header length"))?
                .try_into()
                .expect("4 bytes"),
        ) as usize;
        let json = payload
            .get(4..4 + header_len)
            .ok_or_else(|| corrupt("header length exceeds payload"))?;
        let header: Header = serde_json::from_slice(json)?;
        let mut params = ModelParams::<T>::zeros(header.config.clone());
        if manifest(&params) != header.manifest {
            return Err(corrupt(
                "parameter manifest does not match the model config",
            ));
        }
        let mut values = payload[4 + header_len..]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
        let n_expected: usize = header.manifest.iter().map(|e| e.rows * e.cols).sum();
        if payload.len() - 4 - header_len != 8 * n_expected {
            return Err(corrupt("parameter block size does not match the manifest"));
        }
        let mut fill = |dst: &mut [T]| {
            for d in dst {
                *d = T::of(values.next().expect("sized above"));
            }
        };
        for m in params.params_mut() {
            fill(m.data_mut());
        }
        for b in params.buffers_mut() {
            fill(b);
        }
        Ok(Self {
            params,
            pipeline: header.pipeline,
            embedding: header.embedding,
            meta: header.meta,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Hex SHA-256 of the serialized checkpoint.
    pub fn digest(&self) -> Result<String> {
        Ok(hex::encode(Sha256::digest(self.to_bytes()?)))
    }
}
