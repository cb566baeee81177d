//! Self-supervised training of the voxel encoder from multiview static
//! points: correspondence sampling, the contrastive objective with a
//! momentum-encoder dictionary, the reliability classifier and the staged
//! curriculum (static encoder, reliability net, dynamic finetuning).

mod loss;
mod reliability;
mod train;

pub use loss::{contrastive_loss, ContrastiveOutput, NegativeDictionary};
pub use reliability::{make_reliability_labels, ReliabilityParams, ReliabilitySpec};
pub use train::{
    oracle_static_mask, reliability_accuracy, retrieval_top1, sample_view_pair, train_stage1, train_stage2_reliability,
    train_stage3_finetune, write_metrics_csv, MetricRow, RetrievalConfig, StaticSelection, TrainOutcome, ViewPair,
};

use crate::grid::{GridError, SearchRegionConfig, VoxelGrid};
use crate::net::{CheckpointError, EncoderSpec, NetError};
use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum LearnError {
    #[error("no valid correspondences")]
    NoCorrespondences,
    #[error("contrastive loss needs at least one negative")]
    EmptyNegatives,
    #[error("cannot sample from an empty dictionary")]
    EmptyDictionary,
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("no episodes suitable for {0}")]
    DataMissing(String),
    #[error("non-finite loss at iteration {0}")]
    NonFinite(usize),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

/// Which encoder produces the second member of each pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KeyEncoder {
    /// Momentum copy; gradients flow through the first member only.
    Slow,
    /// The trained encoder; gradients flow through both members.
    Fast,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub temperature: f64,
    pub dictionary_capacity: usize,
    pub negatives_per_positive: usize,
    pub momentum: f64,
    /// Correspondence pairs per iteration.
    pub pairs_per_batch: usize,
    pub learning_rate: f64,
    pub stage1_iterations: usize,
    pub stage2_iterations: usize,
    pub stage3_iterations: usize,
    /// Stage-2/3 passes.
    pub repetitions: usize,
    pub reliability_threshold: f64,
    pub reliability_hidden: usize,
    pub reliability_learning_rate: f64,
    pub seed: u64,
    pub include_positive_in_denominator: bool,
    pub key_encoder: KeyEncoder,
    pub encoder: EncoderSpec,
    /// Size of the training crops.
    pub crop: SearchRegionConfig,
    pub crop_center_y: f64,
    /// Crop centers are drawn uniformly from `[-r, r]` on both ground axes.
    pub crop_center_range: f64,
    pub cameras_per_view: usize,
    /// Largest frame offset between the two views in dynamic episodes.
    pub max_frame_gap: usize,
    /// Iterations between retrieval evaluations; `0` disables them.
    pub retrieval_every: usize,
    /// Fill the dictionary from every voxel of the key map rather than only
    /// from the matched surface voxels.
    pub dictionary_from_all_voxels: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            temperature: 0.07,
            dictionary_capacity: 4096,
            negatives_per_positive: 512,
            momentum: 0.99,
            pairs_per_batch: 512,
            learning_rate: 1e-3,
            stage1_iterations: 3000,
            stage2_iterations: 300,
            stage3_iterations: 1000,
            repetitions: 1,
            reliability_threshold: 0.9,
            reliability_hidden: 32,
            reliability_learning_rate: 3e-3,
            seed: 0,
            include_positive_in_denominator: true,
            key_encoder: KeyEncoder::Slow,
            encoder: EncoderSpec::desk(),
            crop: SearchRegionConfig::default(),
            crop_center_y: 0.75,
            crop_center_range: 6.0,
            cameras_per_view: 4,
            max_frame_gap: 3,
            retrieval_every: 0,
            dictionary_from_all_voxels: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), LearnError> {
        let bad = |m: &str| Err(LearnError::InvalidConfig(m.into()));
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return bad("temperature must be positive");
        }
        if !(self.reliability_threshold > 0.0 && self.reliability_threshold < 1.0) {
            return bad("reliability threshold must lie in (0, 1)");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must lie in [0, 1)");
        }
        if !(self.learning_rate > 0.0) || !(self.reliability_learning_rate > 0.0) {
            return bad("learning rates must be positive");
        }
        if self.pairs_per_batch == 0 || self.negatives_per_positive == 0 || self.dictionary_capacity == 0 {
            return bad("batch, negative and dictionary sizes must be positive");
        }
        if self.cameras_per_view == 0 || self.reliability_hidden == 0 {
            return bad("cameras per view and reliability width must be positive");
        }
        self.encoder.validate()?;
        let stride = self.encoder.total_stride();
        if self.crop.resolution.iter().any(|&r| r == 0 || r % stride != 0) {
            return bad("crop resolution must be a positive multiple of the encoder stride");
        }
        Ok(())
    }
}

/// A pair of matching voxels in two registered maps.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrespondencePair {
    pub index_i: [usize; 3],
    pub index_j: [usize; 3],
    pub m_i: Vec<f64>,
    pub m_j: Vec<f64>,
}

/// Occupancy of `input` resampled onto the voxels of `map`: a map voxel is
/// occupied when any input voxel whose center falls inside it is.
pub fn occupancy_on_map(input: &VoxelGrid, map: &VoxelGrid) -> Vec<bool> {
    if input.spec == map.spec {
        return input.occupancy_mask();
    }
    let mut out = vec![false; map.spec.num_voxels()];
    for li in 0..input.spec.num_voxels() {
        if !input.occupied(li) {
            continue;
        }
        let world = input.spec.voxel_center(input.spec.unravel(li));
        let c = map.spec.world_to_mem(&world);
        if let Some(idx) = map.spec.nearest_voxel(&c) {
            out[map.spec.linear_index(idx)] = true;
        }
    }
    out
}

/// Draws up to `n` voxels, uniformly without replacement, that are occupied
/// in both input grids and allowed by `static_mask`, and reads their
/// features from the two maps. The maps must share one grid.
pub fn sample_static_correspondences<R: Rng>(
    input_i: &VoxelGrid,
    input_j: &VoxelGrid,
    map_i: &VoxelGrid,
    map_j: &VoxelGrid,
    static_mask: &[bool],
    n: usize,
    rng: &mut R,
) -> Result<Vec<CorrespondencePair>, LearnError> {
    let candidates = correspondence_candidates(input_i, input_j, map_i, map_j, static_mask)?;
    if candidates.is_empty() || n == 0 {
        return Err(LearnError::NoCorrespondences);
    }
    let picks = index::sample(rng, candidates.len(), n.min(candidates.len()));
    Ok(picks
        .into_iter()
        .map(|k| {
            let li = candidates[k];
            let idx = map_i.spec.unravel(li);
            CorrespondencePair {
                index_i: idx,
                index_j: idx,
                m_i: map_i.voxel_linear(li).to_vec(),
                m_j: map_j.voxel_linear(li).to_vec(),
            }
        })
        .collect())
}

/// Linear map indices eligible as correspondences.
pub fn correspondence_candidates(
    input_i: &VoxelGrid,
    input_j: &VoxelGrid,
    map_i: &VoxelGrid,
    map_j: &VoxelGrid,
    static_mask: &[bool],
) -> Result<Vec<usize>, LearnError> {
    if map_i.spec != map_j.spec || map_i.channels != map_j.channels {
        return Err(LearnError::ShapeMismatch("maps are not registered to one grid".into()));
    }
    if static_mask.len() != map_i.spec.num_voxels() {
        return Err(LearnError::ShapeMismatch(format!(
            "mask has {} entries for {} voxels",
            static_mask.len(),
            map_i.spec.num_voxels()
        )));
    }
    let occ_i = occupancy_on_map(input_i, map_i);
    let occ_j = occupancy_on_map(input_j, map_j);
    Ok((0..static_mask.len()).filter(|&v| static_mask[v] && occ_i[v] && occ_j[v]).collect())
}
