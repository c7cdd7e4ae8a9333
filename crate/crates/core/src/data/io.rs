//! On-disk dataset format.
//!
//! Single binary file: 8-byte magic, format version (u32 LE), length-prefixed
//! JSON header (counts, shapes, sample directory, payload checksum), then the
//! little-endian f64 payload — per sample the condition vector followed by
//! the trajectory in frame-major order. A JSON-only export exists for
//! inspection.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{Dataset, DatasetMeta, SystemSample, Trajectory};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DATASET_MAGIC: &[u8; 8] = b"CNRIDS01";
pub const DATASET_FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct SampleEntry {
    group_id: usize,
    regime_label: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    meta: DatasetMeta,
    samples: Vec<SampleEntry>,
    /// f64 count of the payload section.
    payload_len: usize,
    /// SHA-256 of the raw payload bytes, hex.
    payload_sha256: String,
}

fn payload_of(dataset: &Dataset) -> Vec<u8> {
    let meta = &dataset.meta;
    let per_sample = meta.condition_dim + meta.frames * meta.bodies * meta.features;
    let mut bytes = Vec::with_capacity(dataset.samples.len() * per_sample * 8);
    for s in &dataset.samples {
        for v in &s.condition {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        for v in s.trajectory.tensor().data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    bytes
}

pub fn write_dataset(path: &Path, dataset: &Dataset) -> Result<()> {
    let payload = payload_of(dataset);
    let header = Header {
        meta: dataset.meta.clone(),
        samples: dataset
            .samples
            .iter()
            .map(|s| SampleEntry {
                group_id: s.group_id,
                regime_label: s.regime_label,
            })
            .collect(),
        payload_len: payload.len() / 8,
        payload_sha256: hex_bytes(&Sha256::digest(&payload)),
    };
    let header_bytes = serde_json::to_vec(&header)
        .map_err(|e| Error::InvalidArgument(format!("header serialization failed: {e}")))?;

    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(DATASET_MAGIC)?;
    w.write_all(&DATASET_FORMAT_VERSION.to_le_bytes())?;
    w.write_all(&(header_bytes.len() as u64).to_le_bytes())?;
    w.write_all(&header_bytes)?;
    w.write_all(&payload)?;
    w.flush()?;
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<Dataset> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    read_exact_at(&mut r, &mut magic, 0)?;
    if &magic != DATASET_MAGIC {
        return Err(Error::Parse {
            offset: 0,
            reason: format!("bad magic {:02x?}", magic),
        });
    }
    let mut version = [0u8; 4];
    read_exact_at(&mut r, &mut version, 8)?;
    let version = u32::from_le_bytes(version);
    if version != DATASET_FORMAT_VERSION {
        return Err(Error::VersionMismatch {
            found: version,
            expected: DATASET_FORMAT_VERSION,
        });
    }
    let mut len = [0u8; 8];
    read_exact_at(&mut r, &mut len, 12)?;
    let header_len = u64::from_le_bytes(len) as usize;
    let mut header_bytes = vec![0u8; header_len];
    read_exact_at(&mut r, &mut header_bytes, 20)?;
    let header: Header = serde_json::from_slice(&header_bytes).map_err(|e| Error::Parse {
        offset: 20,
        reason: format!("header JSON: {e}"),
    })?;

    let payload_offset = 20 + header_len as u64;
    let mut payload = vec![0u8; header.payload_len * 8];
    read_exact_at(&mut r, &mut payload, payload_offset)?;
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)? != 0 {
        return Err(Error::Parse {
            offset: payload_offset + payload.len() as u64,
            reason: "trailing bytes after payload".into(),
        });
    }
    let digest = hex_bytes(&Sha256::digest(&payload));
    if digest != header.payload_sha256 {
        return Err(Error::Integrity(format!(
            "payload checksum {digest} != header {}",
            header.payload_sha256
        )));
    }

    let meta = header.meta;
    let traj_len = meta.frames * meta.bodies * meta.features;
    let per_sample = meta.condition_dim + traj_len;
    if header.samples.len() * per_sample != header.payload_len {
        return Err(Error::Parse {
            offset: payload_offset,
            reason: format!(
                "{} samples of {} values each do not fill payload of {}",
                header.samples.len(),
                per_sample,
                header.payload_len
            ),
        });
    }

    let values: Vec<f64> = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let mut samples = Vec::with_capacity(header.samples.len());
    for (i, entry) in header.samples.iter().enumerate() {
        let base = i * per_sample;
        let condition = values[base..base + meta.condition_dim].to_vec();
        let traj = Tensor::from_vec(
            vec![meta.frames, meta.bodies, meta.features],
            values[base + meta.condition_dim..base + per_sample].to_vec(),
        )
        .map_err(|e| Error::Parse {
            offset: payload_offset + (base * 8) as u64,
            reason: e.to_string(),
        })?;
        samples.push(SystemSample {
            trajectory: Trajectory::new(traj)?,
            condition,
            group_id: entry.group_id,
            regime_label: entry.regime_label,
        });
    }
    let dataset = Dataset { meta, samples };
    dataset.validate()?;
    Ok(dataset)
}

/// Human-inspectable JSON twin of the binary format.
pub fn export_dataset_json(path: &Path, dataset: &Dataset) -> Result<()> {
    #[derive(Serialize)]
    struct JsonSample<'a> {
        group_id: usize,
        regime_label: usize,
        condition: &'a [f64],
        trajectory_shape: &'a [usize],
        trajectory: &'a [f64],
    }
    #[derive(Serialize)]
    struct JsonDataset<'a> {
        schema_version: u32,
        meta: &'a DatasetMeta,
        samples: Vec<JsonSample<'a>>,
    }
    let doc = JsonDataset {
        schema_version: DATASET_FORMAT_VERSION,
        meta: &dataset.meta,
        samples: dataset
            .samples
            .iter()
            .map(|s| JsonSample {
                group_id: s.group_id,
                regime_label: s.regime_label,
                condition: &s.condition,
                trajectory_shape: s.trajectory.tensor().shape(),
                trajectory: s.trajectory.tensor().data(),
            })
            .collect(),
    };
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer(&mut w, &doc)
        .map_err(|e| Error::InvalidArgument(format!("json export failed: {e}")))?;
    w.flush()?;
    Ok(())
}

fn read_exact_at(r: &mut impl Read, buf: &mut [u8], offset: u64) -> Result<()> {
    r.read_exact(buf).map_err(|e| Error::Parse {
        offset,
        reason: format!("truncated file: {e}"),
    })
}

pub(crate) fn hex_bytes(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_dataset, CorpusConfig};

    fn sample_dataset() -> Dataset {
        generate_dataset(
            &CorpusConfig {
                n_systems: 4,
                cycles_per_system: (1, 2),
                bodies: 3,
                frames: 6,
                ..CorpusConfig::default()
            },
            21,
        )
        .unwrap()
    }

    #[test]
    fn write_then_read_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("corpus.bin");
        let ds = sample_dataset();
        write_dataset(&path, &ds).unwrap();
        let back = read_dataset(&path).unwrap();
        assert_eq!(ds, back);
    }

    #[test]
    fn truncated_file_is_a_parse_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("corpus.bin");
        write_dataset(&path, &sample_dataset()).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 9]).unwrap();
        match read_dataset(&path) {
            Err(Error::Parse { .. }) => {}
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn corrupted_payload_is_an_integrity_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("corpus.bin");
        write_dataset(&path, &sample_dataset()).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        let n = bytes.len();
        bytes[n - 3] ^= 0xff;
        std::fs::write(&path, &bytes).unwrap();
        match read_dataset(&path) {
            Err(Error::Integrity(_)) => {}
            other => panic!("expected integrity error, got {other:?}"),
        }
    }

    #[test]
    fn wrong_version_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("corpus.bin");
        write_dataset(&path, &sample_dataset()).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[8] = 42;
        std::fs::write(&path, &bytes).unwrap();
        match read_dataset(&path) {
            Err(Error::VersionMismatch { found: 42, .. }) => {}
            other => panic!("expected version error, got {other:?}"),
        }
    }

    #[test]
    fn bad_magic_is_a_parse_error_at_offset_zero() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("corpus.bin");
        std::fs::write(&path, b"NOTADATASET").unwrap();
        match read_dataset(&path) {
            Err(Error::Parse { offset: 0, .. }) => {}
            other => panic!("expected parse error at 0, got {other:?}"),
        }
    }

    #[test]
    fn json_export_is_readable() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("corpus.json");
        let ds = sample_dataset();
        export_dataset_json(&path, &ds).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let doc: serde_json::Value = serde_json::from_str(&text).unwrap();
        assert_eq!(doc["samples"].as_array().unwrap().len(), ds.samples.len());
    }
}
