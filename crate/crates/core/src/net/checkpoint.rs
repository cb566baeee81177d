//! `.ckpt` files: one JSON header line followed by every parameter tensor
//! as little-endian `f32`, in declaration order.

use super::TensorND;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;
use thiserror::Error;

const CKPT_MAGIC: &str = "ckpt1";
const MAX_TENSOR_VALUES: usize = 1 << 28;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("checkpoint holds {found:?} parameters, expected {expected:?}")]
    WrongKind { expected: CheckpointKind, found: CheckpointKind },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckpointKind {
    Encoder,
    Reliability,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    format: String,
    kind: CheckpointKind,
    spec: serde_json::Value,
    step: u64,
    #[serde(default)]
    meta: BTreeMap<String, String>,
    shapes: Vec<Vec<usize>>,
}

/// Parameters plus the metadata needed to rebuild their owner.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub kind: CheckpointKind,
    pub spec: serde_json::Value,
    pub step: u64,
    pub meta: BTreeMap<String, String>,
    pub tensors: Vec<TensorND>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let header = Header {
            format: CKPT_MAGIC.into(),
            kind: self.kind,
            spec: self.spec.clone(),
            step: self.step,
            meta: self.meta.clone(),
            shapes: self.tensors.iter().map(|t| t.shape.clone()).collect(),
        };
        let mut out = serde_json::to_vec(&header).expect("header serializes");
        out.push(b'\n');
        for t in &self.tensors {
            for v in &t.data {
                out.extend_from_slice(&(*v as f32).to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let nl = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| CheckpointError::Corrupt("missing header line".into()))?;
        let header: Header =
            serde_json::from_slice(&bytes[..nl]).map_err(|e| CheckpointError::Corrupt(format!("header: {e}")))?;
        if header.format != CKPT_MAGIC {
            return Err(CheckpointError::Corrupt(format!("unknown format tag {:?}", header.format)));
        }
        let mut total = 0usize;
        for s in &header.shapes {
            let n = s
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .filter(|&n| n <= MAX_TENSOR_VALUES)
                .ok_or_else(|| CheckpointError::Corrupt(format!("tensor shape {s:?} too large")))?;
            total = total
                .checked_add(n)
                .filter(|&t| t <= MAX_TENSOR_VALUES)
                .ok_or_else(|| CheckpointError::Corrupt("too many parameters".into()))?;
        }
        let body = &bytes[nl + 1..];
        if body.len() != total * 4 {
            return Err(CheckpointError::Corrupt(format!(
                "expected {} payload bytes, found {}",
                total * 4,
                body.len()
            )));
        }
        let mut values = body.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64);
        let mut tensors = Vec::with_capacity(header.shapes.len());
        for shape in header.shapes {
            let n: usize = shape.iter().product();
            let data: Vec<f64> = values.by_ref().take(n).collect();
            if data.iter().any(|v| !v.is_finite()) {
                return Err(CheckpointError::Corrupt("non-finite parameter".into()));
            }
            tensors.push(TensorND { shape, data });
        }
        Ok(Checkpoint { kind: header.kind, spec: header.spec, step: header.step, meta: header.meta, tensors })
    }

    pub fn expect_kind(self, kind: CheckpointKind) -> Result<Self, CheckpointError> {
        if self.kind != kind {
            return Err(CheckpointError::WrongKind { expected: kind, found: self.kind });
        }
        Ok(self)
    }
}

impl super::EncoderParams {
    pub fn to_checkpoint(&self, step: u64, meta: BTreeMap<String, String>) -> Checkpoint {
        Checkpoint {
            kind: CheckpointKind::Encoder,
            spec: serde_json::to_value(&self.spec).expect("spec serializes"),
            step,
            meta,
            tensors: self.tensors.clone(),
        }
    }

    pub fn from_checkpoint(ckpt: Checkpoint) -> Result<Self, CheckpointError> {
        let ckpt = ckpt.expect_kind(CheckpointKind::Encoder)?;
        let spec: super::EncoderSpec =
            serde_json::from_value(ckpt.spec).map_err(|e| CheckpointError::Corrupt(format!("encoder spec: {e}")))?;
        let params = super::EncoderParams { spec, tensors: ckpt.tensors };
        params.validate().map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
        Ok(params)
    }
}

pub fn write_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<(), CheckpointError> {
    std::fs::write(path, ckpt.to_bytes())?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint, CheckpointError> {
    let bytes = std::fs::read(path)?;
    Checkpoint::from_bytes(&bytes)
}
