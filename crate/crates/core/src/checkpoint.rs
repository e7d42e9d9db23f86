//! Binary checkpoints: an 8-byte magic tag, a length-prefixed JSON header,
//! then the parameter tensors as little-endian `f64` in declaration order.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cfm::VectorFieldModel;
use crate::koopman::KoopmanModel;
use crate::ndcore::Tensor;
use crate::nn::MlpSpec;

pub const MAGIC: &[u8; 8] = b"KFLOWCK1";

/// Headers larger than this are treated as corruption.
const MAX_META_BYTES: u64 = 1 << 24;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint or unsupported version (magic {found:?}, expected {:?})", String::from_utf8_lossy(MAGIC))]
    BadMagic { found: String },
    #[error("truncated checkpoint: {0}")]
    Truncated(&'static str),
    #[error("checksum mismatch: header says {expected:08x}, blob hashes to {actual:08x}")]
    Checksum { expected: u32, actual: u32 },
    #[error("malformed header: {0}")]
    Meta(String),
    #[error("blob holds {got} bytes, shapes need {expected}")]
    BlobSize { expected: usize, got: usize },
    #[error("checkpoint holds a {found:?} model, expected {expected:?}")]
    WrongKind { expected: ModelKind, found: ModelKind },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    VectorField,
    Koopman,
}

/// Names of the distributions and path a model was trained for.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskInfo {
    pub prior: String,
    pub target: String,
    pub path: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub kind: ModelKind,
    /// Network architecture (the field net, or the Koopman encoder).
    pub spec: Option<MlpSpec>,
    /// Observable names in coordinate order; Koopman only.
    #[serde(default)]
    pub layout: Vec<String>,
    pub p_total: Option<usize>,
    pub shapes: Vec<Vec<usize>>,
    pub task: Option<TaskInfo>,
    pub seed: u64,
    pub created_unix: u64,
    /// CRC-32 of the blob.
    pub checksum: u32,
    /// Free-form training summary.
    #[serde(default)]
    pub notes: BTreeMap<String, serde_json::Value>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub tensors: Vec<Tensor>,
}

pub fn tensors_to_blob(tensors: &[Tensor]) -> Vec<u8> {
    let n: usize = tensors.iter().map(Tensor::len).sum();
    let mut out = Vec::with_capacity(n * 8);
    for t in tensors {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn blob_to_tensors(blob: &[u8], shapes: &[Vec<usize>]) -> Result<Vec<Tensor>, CheckpointError> {
    let expected: usize = shapes.iter().map(|s| s.iter().product::<usize>() * 8).sum();
    if blob.len() != expected {
        return Err(CheckpointError::BlobSize {
            expected,
            got: blob.len(),
        });
    }
    let mut chunks = blob.chunks_exact(8);
    shapes
        .iter()
        .map(|shape| {
            let n = shape.iter().product::<usize>();
            let data = chunks
                .by_ref()
                .take(n)
                .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
                .collect();
            Tensor::new(shape.clone(), data).map_err(|e| CheckpointError::Meta(e.to_string()))
        })
        .collect()
}

pub fn blob_checksum(blob: &[u8]) -> u32 {
    crc32fast::hash(blob)
}

/// Seconds since the epoch, or `SOURCE_DATE_EPOCH` when set so that
/// repeated runs write identical files.
pub fn creation_timestamp() -> u64 {
    if let Some(v) = std::env::var("SOURCE_DATE_EPOCH")
        .ok()
        .and_then(|s| s.trim().parse().ok())
    {
        return v;
    }
    web_time::SystemTime::now()
        .duration_since(web_time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

impl Checkpoint {
    /// Builds a checkpoint, filling in shapes, checksum and timestamp.
    pub fn new(
        kind: ModelKind,
        spec: Option<MlpSpec>,
        tensors: Vec<Tensor>,
        seed: u64,
        task: Option<TaskInfo>,
    ) -> Self {
        let blob = tensors_to_blob(&tensors);
        Self {
            meta: CheckpointMeta {
                kind,
                spec,
                layout: Vec::new(),
                p_total: None,
                shapes: tensors.iter().map(|t| t.shape().to_vec()).collect(),
                task,
                seed,
                created_unix: creation_timestamp(),
                checksum: blob_checksum(&blob),
                notes: BTreeMap::new(),
            },
            tensors,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let blob = tensors_to_blob(&self.tensors);
        let mut meta = self.meta.clone();
        meta.checksum = blob_checksum(&blob);
        meta.shapes = self.tensors.iter().map(|t| t.shape().to_vec()).collect();
        let header = serde_json::to_vec(&meta).expect("meta serializes");
        let mut out = Vec::with_capacity(16 + header.len() + blob.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&blob);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        if bytes.len() < 8 {
            return Err(CheckpointError::Truncated("magic"));
        }
        if &bytes[..8] != MAGIC {
            return Err(CheckpointError::BadMagic {
                found: String::from_utf8_lossy(&bytes[..8]).into_owned(),
            });
        }
        let len_bytes = bytes.get(8..16).ok_or(CheckpointError::Truncated("header length"))?;
        let meta_len = u64::from_le_bytes(len_bytes.try_into().expect("8 bytes"));
        if meta_len > MAX_META_BYTES {
            return Err(CheckpointError::Meta(format!("header length {meta_len}")));
        }
        let meta_end = 16 + meta_len as usize;
        let header = bytes.get(16..meta_end).ok_or(CheckpointError::Truncated("header"))?;
        let meta: CheckpointMeta =
            serde_json::from_slice(header).map_err(|e| CheckpointError::Meta(e.to_string()))?;
        let blob = &bytes[meta_end..];
        let actual = blob_checksum(blob);
        if actual != meta.checksum {
            return Err(CheckpointError::Checksum {
                expected: meta.checksum,
                actual,
            });
        }
        let tensors = blob_to_tensors(blob, &meta.shapes)?;
        Ok(Self { meta, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        let io = |source| CheckpointError::Io {
            path: path.display().to_string(),
            source,
        };
        let mut f = fs::File::create(path).map_err(io)?;
        f.write_all(&self.to_bytes()).map_err(io)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let bytes = fs::read(path).map_err(|source| CheckpointError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_bytes(&bytes)
    }

    fn expect_kind(&self, kind: ModelKind) -> Result<(), CheckpointError> {
        if self.meta.kind != kind {
            return Err(CheckpointError::WrongKind {
                expected: kind,
                found: self.meta.kind,
            });
        }
        Ok(())
    }

    pub fn from_vector_field(model: &VectorFieldModel, seed: u64, task: Option<TaskInfo>) -> Self {
        Self::new(
            ModelKind::VectorField,
            Some(*model.spec()),
            model.params().to_vec(),
            seed,
            task,
        )
    }

    pub fn to_vector_field(&self) -> Result<VectorFieldModel, CheckpointError> {
        self.expect_kind(ModelKind::VectorField)?;
        let spec = self
            .meta
            .spec
            .ok_or_else(|| CheckpointError::Meta("missing network spec".into()))?;
        VectorFieldModel::from_params(spec, self.tensors.clone())
            .map_err(|e| CheckpointError::Meta(e.to_string()))
    }

    /// Tensors are the encoder parameters followed by `L`.
    pub fn from_koopman(model: &KoopmanModel, seed: u64, task: Option<TaskInfo>) -> Self {
        let mut tensors = model.encoder_params().to_vec();
        tensors.push(model.generator().clone());
        let mut ck = Self::new(
            ModelKind::Koopman,
            model.encoder_spec().copied(),
            tensors,
            seed,
            task,
        );
        ck.meta.layout = model.layout();
        ck.meta.p_total = Some(model.p_total());
        ck
    }

    pub fn to_koopman(&self) -> Result<KoopmanModel, CheckpointError> {
        self.expect_kind(ModelKind::Koopman)?;
        let (l, enc) = self
            .tensors
            .split_last()
            .ok_or_else(|| CheckpointError::Meta("no tensors".into()))?;
        let model = KoopmanModel::from_parts(self.meta.spec, enc.to_vec(), l.clone())
            .map_err(|e| CheckpointError::Meta(e.to_string()))?;
        if self.meta.p_total.is_some_and(|p| p != model.p_total()) {
            return Err(CheckpointError::Meta(format!(
                "p_total {:?} disagrees with generator shape {:?}",
                self.meta.p_total,
                l.shape()
            )));
        }
        Ok(model)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let t = vec![
            Tensor::from_rows(&[[1.0, -2.5], [f64::MIN_POSITIVE, 1e300]]),
            Tensor::from_rows(&[[0.1, 0.2, 0.3]]),
        ];
        let mut ck = Checkpoint::new(ModelKind::VectorField, None, t, 7, None);
        ck.meta.created_unix = 0;
        ck
    }

    #[test]
    fn bytes_round_trip() {
        let ck = sample();
        let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes(), ck.to_bytes());
    }

    #[test]
    fn corrupted_blob_rejected() {
        let mut bytes = sample().to_bytes();
        let last = bytes.len() - 3;
        bytes[last] ^= 0x10;
        assert!(matches!(
            Checkpoint::from_bytes(&bytes),
            Err(CheckpointError::Checksum { .. })
        ));
    }

    #[test]
    fn unknown_magic_rejected() {
        let mut bytes = sample().to_bytes();
        bytes[7] = b'9';
        assert!(matches!(
            Checkpoint::from_bytes(&bytes),
            Err(CheckpointError::BadMagic { .. })
        ));
        assert!(matches!(
            Checkpoint::from_bytes(b"KF"),
            Err(CheckpointError::Truncated(_))
        ));
    }

    #[test]
    fn blob_size_checked() {
        let blob = tensors_to_blob(&[Tensor::zeros([2, 2])]);
        assert!(blob_to_tensors(&blob, &[vec![3, 2]]).is_err());
        assert_eq!(blob_to_tensors(&blob, &[vec![2, 2]]).unwrap()[0], Tensor::zeros([2, 2]));
    }

    #[test]
    fn kind_is_checked() {
        assert!(matches!(
            sample().to_koopman(),
            Err(CheckpointError::WrongKind { .. })
        ));
    }
}
