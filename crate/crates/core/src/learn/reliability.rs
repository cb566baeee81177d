use super::LearnError;
use crate::grid::VoxelGrid;
use crate::net::ops::LEAKY_SLOPE;
use crate::net::{Checkpoint, CheckpointError, CheckpointKind, TensorND};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// Architecture of the per-voxel static/moving classifier.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReliabilitySpec {
    pub channels: usize,
    pub hidden: usize,
}

/// Two fully connected layers, `C -> h -> 1`, shared by every voxel.
/// Tensors: `w1 [C, h]`, `b1 [h]`, `w2 [h]`, `b2 [1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReliabilityParams {
    pub spec: ReliabilitySpec,
    pub tensors: Vec<TensorND>,
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + e^z)` without overflow.
fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

impl ReliabilityParams {
    fn shapes(spec: ReliabilitySpec) -> [Vec<usize>; 4] {
        [vec![spec.channels, spec.hidden], vec![spec.hidden], vec![spec.hidden], vec![1]]
    }

    pub fn zeros(spec: ReliabilitySpec) -> Self {
        ReliabilityParams { spec, tensors: Self::shapes(spec).iter().map(|s| TensorND::zeros(s)).collect() }
    }

    pub fn init(spec: ReliabilitySpec, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = Self::zeros(spec);
        let b1 = (1.0 / spec.channels.max(1) as f64).sqrt();
        let b2 = (1.0 / spec.hidden.max(1) as f64).sqrt();
        for (t, bound) in p.tensors.iter_mut().zip([b1, b1, b2, b2]) {
            for v in &mut t.data {
                *v = rng.gen_range(-bound..bound);
            }
        }
        p
    }

    pub fn validate(&self) -> Result<(), LearnError> {
        let shapes = Self::shapes(self.spec);
        if self.tensors.len() != 4
            || shapes
                .iter()
                .zip(&self.tensors)
                .any(|(s, t)| *s != t.shape || t.data.len() != s.iter().product::<usize>())
        {
            return Err(LearnError::ShapeMismatch("reliability tensors do not match their spec".into()));
        }
        Ok(())
    }

    fn hidden_pre(&self, x: &[f64]) -> Vec<f64> {
        let h = self.spec.hidden;
        let w1 = &self.tensors[0].data;
        let mut a = self.tensors[1].data.clone();
        for (c, &xc) in x.iter().enumerate() {
            if xc == 0.0 {
                continue;
            }
            let row = &w1[c * h..(c + 1) * h];
            for (ak, wk) in a.iter_mut().zip(row) {
                *ak += xc * wk;
            }
        }
        a
    }

    pub fn to_checkpoint(&self, step: u64, meta: BTreeMap<String, String>) -> Checkpoint {
        Checkpoint {
            kind: CheckpointKind::Reliability,
            spec: serde_json::to_value(self.spec).expect("spec serializes"),
            step,
            meta,
            tensors: self.tensors.clone(),
        }
    }

    pub fn from_checkpoint(ckpt: Checkpoint) -> Result<Self, CheckpointError> {
        let ckpt = ckpt.expect_kind(CheckpointKind::Reliability)?;
        let spec: ReliabilitySpec = serde_json::from_value(ckpt.spec)
            .map_err(|e| CheckpointError::Corrupt(format!("reliability spec: {e}")))?;
        let p = ReliabilityParams { spec, tensors: ckpt.tensors };
        p.validate().map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
        Ok(p)
    }

    /// Pre-sigmoid output for one feature-difference vector.
    pub fn logit(&self, x: &[f64]) -> f64 {
        let a = self.hidden_pre(x);
        let w2 = &self.tensors[2].data;
        let mut z = self.tensors[3].data[0];
        for (ak, wk) in a.iter().zip(w2) {
            let act = if *ak > 0.0 { *ak } else { LEAKY_SLOPE * ak };
            z += act * wk;
        }
        z
    }

    pub fn probability(&self, x: &[f64]) -> f64 {
        sigmoid(self.logit(x))
    }

    /// Per-voxel probability that the content is static.
    pub fn forward(&self, diff: &VoxelGrid) -> Result<VoxelGrid, LearnError> {
        self.validate()?;
        if diff.channels != self.spec.channels {
            return Err(LearnError::ShapeMismatch(format!(
                "reliability net expects {} channels, grid has {}",
                self.spec.channels, diff.channels
            )));
        }
        let data = diff.data.chunks_exact(diff.channels).map(|x| self.probability(x)).collect();
        Ok(VoxelGrid { spec: diff.spec, channels: 1, data })
    }

    /// Mean binary cross-entropy over `inputs` with 0/1 `labels`, and its
    /// gradient with respect to every tensor.
    pub fn bce_loss_and_grads(&self, inputs: &[&[f64]], labels: &[f64]) -> Result<(f64, Vec<TensorND>), LearnError> {
        self.validate()?;
        if inputs.len() != labels.len() || inputs.is_empty() {
            return Err(LearnError::ShapeMismatch("need one label per nonempty input".into()));
        }
        let h = self.spec.hidden;
        let mut grads: Vec<TensorND> = self.tensors.iter().map(|t| t.zeros_like()).collect();
        let w2 = self.tensors[2].data.clone();
        let scale = 1.0 / inputs.len() as f64;
        let mut loss = 0.0;
        for (x, &y) in inputs.iter().zip(labels) {
            if x.len() != self.spec.channels {
                return Err(LearnError::ShapeMismatch("input length differs from channel count".into()));
            }
            let a = self.hidden_pre(x);
            let act: Vec<f64> = a.iter().map(|&v| if v > 0.0 { v } else { LEAKY_SLOPE * v }).collect();
            let z = self.tensors[3].data[0] + act.iter().zip(&w2).map(|(u, w)| u * w).sum::<f64>();
            // BCE(z, y) = softplus(z) - y z
            loss += softplus(z) - y * z;
            let dz = (sigmoid(z) - y) * scale;
            grads[3].data[0] += dz;
            let mut da = vec![0.0; h];
            for k in 0..h {
                grads[2].data[k] += dz * act[k];
                da[k] = dz * w2[k] * if a[k] > 0.0 { 1.0 } else { LEAKY_SLOPE };
                grads[1].data[k] += da[k];
            }
            for (c, &xc) in x.iter().enumerate() {
                if xc == 0.0 {
                    continue;
                }
                let row = &mut grads[0].data[c * h..(c + 1) * h];
                for (g, d) in row.iter_mut().zip(&da) {
                    *g += xc * d;
                }
            }
        }
        Ok((loss * scale, grads))
    }
}

/// Positive input `map_i - map_j` and negative input `map_i - shuffle(map_j)`.
/// The shuffle is a seeded permutation of voxel positions (restricted to
/// `mask` when given) that keeps each channel vector intact.
pub fn make_reliability_labels(
    map_i: &VoxelGrid,
    map_j: &VoxelGrid,
    mask: Option<&[bool]>,
    seed: u64,
) -> Result<(VoxelGrid, VoxelGrid), LearnError> {
    if map_i.spec.resolution != map_j.spec.resolution || map_i.channels != map_j.channels {
        return Err(LearnError::ShapeMismatch("maps differ in shape".into()));
    }
    let n = map_i.spec.num_voxels();
    if mask.is_some_and(|m| m.len() != n) {
        return Err(LearnError::ShapeMismatch("mask length differs from voxel count".into()));
    }
    let c = map_i.channels;
    let positions: Vec<usize> = (0..n).filter(|&v| mask.map_or(true, |m| m[v])).collect();
    let mut shuffled = positions.clone();
    shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut perm: Vec<usize> = (0..n).collect();
    for (&dst, &src) in positions.iter().zip(&shuffled) {
        perm[dst] = src;
    }
    let mut pos = map_i.clone();
    let mut neg = map_i.clone();
    for v in 0..n {
        let src = perm[v];
        for ch in 0..c {
            pos.data[v * c + ch] -= map_j.data[v * c + ch];
            neg.data[v * c + ch] -= map_j.data[src * c + ch];
        }
    }
    Ok((pos, neg))
}
