//! Dense tensors with hand-written reverse-mode gradients for the 3D
//! encoder-decoder, plus Adam and the momentum ("slow") parameter copy.

mod adam;
mod checkpoint;
mod encoder;
pub mod ops;

pub use adam::{adam_step, OptimState};
pub use checkpoint::{read_checkpoint, write_checkpoint, Checkpoint, CheckpointError, CheckpointKind};
pub use encoder::{
    momentum_update, DecoderStage, EncoderCache, EncoderGrads, EncoderParams, EncoderSpec, EncoderStage,
};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NetError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("spec mismatch: {0}")]
    SpecMismatch(String),
    #[error("invalid encoder spec: {0}")]
    InvalidSpec(String),
}

/// Row-major dense array.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorND {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl TensorND {
    pub fn zeros(shape: &[usize]) -> Self {
        TensorND { shape: shape.to_vec(), data: vec![0.0; shape.iter().product()] }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Self, NetError> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(NetError::ShapeMismatch(format!("shape {shape:?} needs {n} values, got {}", data.len())));
        }
        Ok(TensorND { shape: shape.to_vec(), data })
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn zeros_like(&self) -> Self {
        TensorND::zeros(&self.shape)
    }
}
