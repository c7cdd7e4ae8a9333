//! Versioned on-disk checkpoints: magic, format version, JSON manifest
//! (config, dims, tensor directory, normalization stats, rng state, payload
//! checksum), then the little-endian f64 parameter payload in directory
//! order. Reloading reproduces forward passes bit for bit.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{Adjacency, NormalizationStats};
use crate::error::{Error, Result};
use crate::nn::Params;
use crate::tensor::Tensor;
use crate::training::{CnriModel, ModelDims, TrainingConfig};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"CNRICKP1";
pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

/// Serializable ChaCha state (seed, stream, word position).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed_hex: String,
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        RngState {
            seed_hex: crate::data::hex_bytes(&rng.get_seed()),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        let bytes = unhex(&self.seed_hex)?;
        let seed: [u8; 32] = bytes
            .try_into()
            .map_err(|_| Error::Integrity("rng seed must be 32 bytes".into()))?;
        let mut rng = <ChaCha8Rng as rand::SeedableRng>::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        Ok(rng)
    }
}

fn unhex(s: &str) -> Result<Vec<u8>> {
    if s.len() % 2 != 0 {
        return Err(Error::Integrity("odd hex length".into()));
    }
    (0..s.len())
        .step_by(2)
        .map(|i| {
            u8::from_str_radix(&s[i..i + 2], 16)
                .map_err(|e| Error::Integrity(format!("bad hex: {e}")))
        })
        .collect()
}

/// Everything needed to reconstruct a trained model and its data pipeline.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model_kind: String,
    pub config: TrainingConfig,
    pub dims: ModelDims,
    pub params: Params,
    pub stats: NormalizationStats,
    pub fold: usize,
    pub epoch: usize,
    pub rng_state: RngState,
    pub adjacency: Option<Adjacency>,
}

impl Checkpoint {
    /// Rebuilds the model behind this checkpoint. The stored parameter set
    /// must structurally match what the config implies.
    pub fn model(&self) -> Result<CnriModel> {
        if self.model_kind != "cnri" {
            return Err(Error::RegimeMismatch {
                found: self.model_kind.clone(),
                requested: "cnri".into(),
            });
        }
        let mut model = CnriModel::new(self.config.clone(), self.dims, self.adjacency.as_ref())?;
        verify_structure(&model.params, &self.params)?;
        model.params = self.params.clone();
        Ok(model)
    }

    /// Guards a caller's regime expectation against the stored one.
    pub fn ensure_regime(&self, requested: crate::encoders::Regime) -> Result<()> {
        if self.config.regime != requested {
            return Err(Error::RegimeMismatch {
                found: self.config.regime.to_string(),
                requested: requested.to_string(),
            });
        }
        Ok(())
    }
}

fn verify_structure(expected: &Params, stored: &Params) -> Result<()> {
    if expected.len() != stored.len() {
        return Err(Error::Integrity(format!(
            "checkpoint has {} tensors, model expects {}",
            stored.len(),
            expected.len()
        )));
    }
    for (name, tensor) in expected.iter() {
        if !stored.contains(name) {
            return Err(Error::Integrity(format!("checkpoint misses tensor `{name}`")));
        }
        if stored.get(name).shape() != tensor.shape() {
            return Err(Error::Integrity(format!(
                "tensor `{name}` has shape {:?}, expected {:?}",
                stored.get(name).shape(),
                tensor.shape()
            )));
        }
    }
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    /// f64 offset into the payload.
    offset: usize,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    model_kind: String,
    config: TrainingConfig,
    dims: ModelDims,
    stats: NormalizationStats,
    fold: usize,
    epoch: usize,
    rng_state: RngState,
    adjacency: Option<Adjacency>,
    tensors: Vec<TensorEntry>,
    payload_len: usize,
    payload_sha256: String,
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let mut tensors = Vec::with_capacity(ckpt.params.len());
    let mut payload = Vec::new();
    let mut offset = 0usize;
    for (name, tensor) in ckpt.params.iter() {
        tensors.push(TensorEntry {
            name: name.clone(),
            shape: tensor.shape().to_vec(),
            offset,
        });
        for v in tensor.data() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
        offset += tensor.len();
    }
    let manifest = Manifest {
        model_kind: ckpt.model_kind.clone(),
        config: ckpt.config.clone(),
        dims: ckpt.dims,
        stats: ckpt.stats.clone(),
        fold: ckpt.fold,
        epoch: ckpt.epoch,
        rng_state: ckpt.rng_state.clone(),
        adjacency: ckpt.adjacency.clone(),
        tensors,
        payload_len: offset,
        payload_sha256: crate::data::hex_bytes(&Sha256::digest(&payload)),
    };
    let manifest_bytes = serde_json::to_vec(&manifest)
        .map_err(|e| Error::InvalidArgument(format!("manifest serialization failed: {e}")))?;

    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_FORMAT_VERSION.to_le_bytes())?;
    w.write_all(&(manifest_bytes.len() as u64).to_le_bytes())?;
    w.write_all(&manifest_bytes)?;
    w.write_all(&payload)?;
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(|e| Error::Parse {
        offset: 0,
        reason: format!("truncated checkpoint: {e}"),
    })?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::Parse {
            offset: 0,
            reason: format!("bad magic {magic:02x?}"),
        });
    }
    let mut version = [0u8; 4];
    r.read_exact(&mut version).map_err(|e| Error::Parse {
        offset: 8,
        reason: e.to_string(),
    })?;
    let version = u32::from_le_bytes(version);
    if version != CHECKPOINT_FORMAT_VERSION {
        return Err(Error::VersionMismatch {
            found: version,
            expected: CHECKPOINT_FORMAT_VERSION,
        });
    }
    let mut len = [0u8; 8];
    r.read_exact(&mut len).map_err(|e| Error::Parse {
        offset: 12,
        reason: e.to_string(),
    })?;
    let manifest_len = u64::from_le_bytes(len) as usize;
    let mut manifest_bytes = vec![0u8; manifest_len];
    r.read_exact(&mut manifest_bytes).map_err(|e| Error::Parse {
        offset: 20,
        reason: format!("truncated manifest: {e}"),
    })?;
    let manifest: Manifest = serde_json::from_slice(&manifest_bytes).map_err(|e| Error::Parse {
        offset: 20,
        reason: format!("manifest JSON: {e}"),
    })?;

    let payload_offset = 20 + manifest_len as u64;
    let mut payload = vec![0u8; manifest.payload_len * 8];
    r.read_exact(&mut payload).map_err(|e| Error::Parse {
        offset: payload_offset,
        reason: format!("truncated payload: {e}"),
    })?;
    let digest = crate::data::hex_bytes(&Sha256::digest(&payload));
    if digest != manifest.payload_sha256 {
        return Err(Error::Integrity(format!(
            "payload checksum {digest} != manifest {}",
            manifest.payload_sha256
        )));
    }

    let values: Vec<f64> = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let mut params = Params::new();
    for entry in &manifest.tensors {
        let n: usize = entry.shape.iter().product();
        if entry.offset + n > values.len() {
            return Err(Error::Parse {
                offset: payload_offset,
                reason: format!("tensor `{}` overruns payload", entry.name),
            });
        }
        params.insert(
            &entry.name,
            Tensor::from_vec(entry.shape.clone(), values[entry.offset..entry.offset + n].to_vec())?,
        );
    }
    Ok(Checkpoint {
        model_kind: manifest.model_kind,
        config: manifest.config,
        dims: manifest.dims,
        params,
        stats: manifest.stats,
        fold: manifest.fold,
        epoch: manifest.epoch,
        rng_state: manifest.rng_state,
        adjacency: manifest.adjacency,
    })
}

