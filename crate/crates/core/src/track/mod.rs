//! Template-based 3D object tracking on learned feature maps.
//!
//! The object's voxels are read from the frame-0 map, relocated in every
//! later frame by a soft spatial argmax over a search region that follows
//! the object, and a RANSAC rigid fit of the relocated points moves the box.

mod boxes;

pub use boxes::Box3D;

use crate::geom::{fit_rigid_least_squares, GeomError, RigidTransform, Vec3};
use crate::grid::{make_search_region, GridError, GridSpec, SearchRegionConfig, VoxelGrid};
use crate::net::{EncoderParams, NetError};
use crate::sim::Episode;
use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::io::Write;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrackError {
    #[error("no template voxels inside the initial box")]
    EmptyTemplate,
    #[error("need at least 3 correspondences, got {0}")]
    TooFewCorrespondences(usize),
    #[error("source and destination lists differ in length")]
    LengthMismatch,
    #[error(transparent)]
    Geom(#[from] GeomError),
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error("malformed trajectory: {0}")]
    MalformedTrajectory(String),
}

/// Which voxels inside the initial box form the template.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemplateVoxels {
    /// Voxels with observed surface.
    Occupied,
    /// Every voxel whose center is inside the box.
    AllInBox,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrackerConfig {
    /// Object-centered search region; `None` encodes `global_grid` instead.
    pub search: Option<SearchRegionConfig>,
    /// Fixed scene grid used when no search region is set.
    pub global_grid: GridSpec,
    /// Multiplier on feature dot products inside the soft argmax.
    pub sharpness: f64,
    pub ransac_iterations: usize,
    /// Meters.
    pub inlier_threshold: f64,
    /// The track is lost below `max(3, fraction * template size)` inliers.
    pub min_inlier_fraction: f64,
    pub template: TemplateVoxels,
    /// Shift each search region by less than one voxel so its lattice lines
    /// up with `global_grid`.
    pub snap_search_region: bool,
    pub seed: u64,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        TrackerConfig {
            search: Some(SearchRegionConfig::default()),
            global_grid: scene_grid(),
            sharpness: 50.0,
            ransac_iterations: 256,
            inlier_threshold: 0.25,
            min_inlier_fraction: 0.1,
            template: TemplateVoxels::Occupied,
            snap_search_region: true,
            seed: 0,
        }
    }
}

/// 32 x 4 x 32 m cube over the synthetic scenes at 0.5 m voxels, floor at
/// the center of the lowest voxel layer.
pub fn scene_grid() -> GridSpec {
    GridSpec {
        center: [0.0, 1.75, 0.0],
        extent: [32.0, 4.0, 32.0],
        resolution: [64, 8, 64],
        reference_pose: RigidTransform::identity(),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObjectTemplate {
    /// Grid coordinates in the frame-0 map.
    pub coords: Vec<[usize; 3]>,
    /// World positions of the same voxels.
    pub points: Vec<Vec3>,
    pub features: Vec<Vec<f64>>,
    pub source_box: Box3D,
}

impl ObjectTemplate {
    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }
}

/// Template from every map voxel whose center lies in `bx` (and, for
/// `TemplateVoxels::Occupied`, whose input voxel is occupied).
pub fn extract_template(
    input0: &VoxelGrid,
    map0: &VoxelGrid,
    bx: &Box3D,
    which: TemplateVoxels,
) -> Result<ObjectTemplate, TrackError> {
    let occupancy = crate::learn::occupancy_on_map(input0, map0);
    let mut t = ObjectTemplate { coords: Vec::new(), points: Vec::new(), features: Vec::new(), source_box: *bx };
    for li in 0..map0.spec.num_voxels() {
        let idx = map0.spec.unravel(li);
        let p = map0.spec.voxel_center(idx);
        if !bx.contains(&p) || (which == TemplateVoxels::Occupied && !occupancy[li]) {
            continue;
        }
        t.coords.push(idx);
        t.points.push(p);
        t.features.push(map0.voxel_linear(li).to_vec());
    }
    if t.is_empty() {
        return Err(TrackError::EmptyTemplate);
    }
    Ok(t)
}

/// Expected grid coordinate under `softmax(sharpness * m . M[x, y, z])`
/// over every voxel of `search_map`.
pub fn soft_argmax_correspond(m: &[f64], search_map: &VoxelGrid, sharpness: f64) -> Vec3 {
    let c = search_map.channels;
    let scores: Vec<f64> =
        search_map.data.chunks_exact(c).map(|v| sharpness * v.iter().zip(m).map(|(a, b)| a * b).sum::<f64>()).collect();
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    let mut acc = Vec3::zeros();
    for (li, s) in scores.iter().enumerate() {
        let w = (s - max).exp();
        let [x, y, k] = search_map.spec.unravel(li);
        z += w;
        acc += Vec3::new(x as f64, y as f64, k as f64) * w;
    }
    acc / z
}

fn inlier_mask(t: &RigidTransform, src: &[Vec3], dst: &[Vec3], threshold: f64) -> Vec<bool> {
    src.iter().zip(dst).map(|(s, d)| (t.apply(s) - d).norm() <= threshold).collect()
}

/// Sum of squared residuals truncated at the threshold.
fn truncated_cost(t: &RigidTransform, src: &[Vec3], dst: &[Vec3], threshold: f64) -> f64 {
    let cap = threshold * threshold;
    src.iter().zip(dst).map(|(s, d)| (t.apply(s) - d).norm_squared().min(cap)).sum()
}

/// Best rigid transform over random 3-point samples, scored by truncated
/// squared residuals so that tighter fits win ties in inlier count, then
/// refit on its inliers. The refit is kept only if it lowers the cost.
pub fn estimate_rigid_ransac(
    src: &[Vec3],
    dst: &[Vec3],
    iterations: usize,
    inlier_threshold: f64,
    seed: u64,
) -> Result<(RigidTransform, Vec<bool>), TrackError> {
    if src.len() != dst.len() {
        return Err(TrackError::LengthMismatch);
    }
    if src.len() < 3 {
        return Err(TrackError::TooFewCorrespondences(src.len()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<(RigidTransform, f64)> = None;
    for _ in 0..iterations.max(1) {
        let pick = index::sample(&mut rng, src.len(), 3);
        let s: Vec<Vec3> = pick.iter().map(|i| src[i]).collect();
        let d: Vec<Vec3> = pick.iter().map(|i| dst[i]).collect();
        let Ok(t) = fit_rigid_least_squares(&s, &d) else {
            continue;
        };
        let cost = truncated_cost(&t, src, dst, inlier_threshold);
        if best.as_ref().map_or(true, |b| cost < b.1) {
            best = Some((t, cost));
        }
    }
    let Some((mut t, mut cost)) = best else {
        return Err(GeomError::DegenerateConfiguration("every minimal sample was collinear".into()).into());
    };
    for _ in 0..REFIT_ROUNDS {
        let mask = inlier_mask(&t, src, dst, inlier_threshold);
        let (s, d): (Vec<Vec3>, Vec<Vec3>) =
            src.iter().zip(dst).zip(&mask).filter(|(_, &m)| m).map(|((a, b), _)| (*a, *b)).unzip();
        let Ok(refit) = fit_rigid_least_squares(&s, &d) else {
            break;
        };
        let refit_cost = truncated_cost(&refit, src, dst, inlier_threshold);
        if refit_cost >= cost {
            break;
        }
        t = refit;
        cost = refit_cost;
    }
    let mask = inlier_mask(&t, src, dst, inlier_threshold);
    Ok((t, mask))
}

const REFIT_ROUNDS: usize = 3;

#[derive(Debug, Clone, PartialEq)]
pub struct TrackState {
    pub template: ObjectTemplate,
    pub current: Box3D,
    pub boxes: Vec<Box3D>,
    /// Frame-0-to-frame-t motion estimates.
    pub transforms: Vec<RigidTransform>,
    pub inliers: Vec<usize>,
    pub lost: Vec<bool>,
}

impl TrackState {
    pub fn new(template: ObjectTemplate) -> Self {
        let b = template.source_box;
        let n = template.len();
        TrackState {
            template,
            current: b,
            boxes: vec![b],
            transforms: vec![RigidTransform::identity()],
            inliers: vec![n],
            lost: vec![false],
        }
    }
}

fn region_for(state_center: &Vec3, cfg: &TrackerConfig) -> GridSpec {
    match &cfg.search {
        Some(sr) => {
            let mut spec = make_search_region(state_center, sr);
            if cfg.snap_search_region {
                let g = &cfg.global_grid;
                for a in 0..3 {
                    let vs = spec.extent[a] / spec.resolution[a] as f64;
                    let origin = g.center[a] - 0.5 * g.extent[a];
                    let lo = spec.center[a] - 0.5 * spec.extent[a];
                    spec.center[a] = origin + ((lo - origin) / vs).round() * vs + 0.5 * spec.extent[a];
                }
            }
            spec
        }
        None => cfg.global_grid,
    }
}

/// Advances a track by one frame given that frame's encoded `map`.
pub fn step_track_with_map(state: &mut TrackState, map: &VoxelGrid, cfg: &TrackerConfig) {
    let frame = state.boxes.len();
    let tpl = &state.template;
    let dst: Vec<Vec3> = tpl
        .features
        .par_iter()
        .map(|m| map.spec.mem_to_world(&soft_argmax_correspond(m, map, cfg.sharpness)))
        .collect();
    let needed = 3usize.max((cfg.min_inlier_fraction * tpl.len() as f64).ceil() as usize);
    let seed = cfg.seed ^ (frame as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    let fit = estimate_rigid_ransac(&tpl.points, &dst, cfg.ransac_iterations, cfg.inlier_threshold, seed);
    let (next, transform, inliers, lost) = match fit {
        Ok((t, mask)) => {
            let n = mask.iter().filter(|&&b| b).count();
            if n >= needed {
                (tpl.source_box.transformed(&t), t, n, false)
            } else {
                (state.current, *state.transforms.last().unwrap(), n, true)
            }
        }
        Err(_) => (state.current, *state.transforms.last().unwrap(), 0, true),
    };
    state.current = next;
    state.boxes.push(next);
    state.transforms.push(transform);
    state.inliers.push(inliers);
    state.lost.push(lost);
}

/// Encodes frame `t` around the current box and advances the track.
pub fn step_track<F>(
    state: &mut TrackState,
    voxelize: F,
    encoder: &EncoderParams,
    cfg: &TrackerConfig,
) -> Result<(), TrackError>
where
    F: Fn(&GridSpec) -> Result<VoxelGrid, GridError>,
{
    let spec = region_for(&state.current.center, cfg);
    let map = encoder.forward(&voxelize(&spec)?)?;
    step_track_with_map(state, &map, cfg);
    Ok(())
}

/// Tracks several objects of one episode from their frame-0 boxes. Without
/// a search region the scene map of each frame is shared by all objects.
pub fn track_objects(
    ep: &Episode,
    boxes0: &[Box3D],
    encoder: &EncoderParams,
    cfg: &TrackerConfig,
) -> Result<Vec<TrackState>, TrackError> {
    let cams: Vec<usize> = (0..ep.camera_count()).collect();
    let voxelize = |frame: usize, spec: &GridSpec| {
        let views: Vec<(usize, usize)> = cams.iter().map(|&c| (frame, c)).collect();
        ep.voxelize(&views, spec)
    };
    let mut states = Vec::with_capacity(boxes0.len());
    let global0 = if cfg.search.is_none() {
        let input = voxelize(0, &cfg.global_grid)?;
        let map = encoder.forward(&input)?;
        Some((input, map))
    } else {
        None
    };
    for b in boxes0 {
        let (input, map) = match &global0 {
            Some((i, m)) => (i.clone(), m.clone()),
            None => {
                let spec = region_for(&b.center, cfg);
                let input = voxelize(0, &spec)?;
                let map = encoder.forward(&input)?;
                (input, map)
            }
        };
        states.push(TrackState::new(extract_template(&input, &map, b, cfg.template)?));
    }
    for frame in 1..ep.frame_count() {
        if cfg.search.is_none() {
            let map = encoder.forward(&voxelize(frame, &cfg.global_grid)?)?;
            for s in &mut states {
                step_track_with_map(s, &map, cfg);
            }
        } else {
            for s in &mut states {
                step_track(s, |spec| voxelize(frame, spec), encoder, cfg)?;
            }
        }
    }
    Ok(states)
}

pub fn track_sequence(
    ep: &Episode,
    box0: &Box3D,
    encoder: &EncoderParams,
    cfg: &TrackerConfig,
) -> Result<TrackState, TrackError> {
    Ok(track_objects(ep, std::slice::from_ref(box0), encoder, cfg)?.remove(0))
}

/// One line of trajectory output.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrajectoryRecord {
    pub frame: usize,
    pub center: [f64; 3],
    pub dims: [f64; 3],
    pub yaw: f64,
    pub inliers: usize,
    pub lost: bool,
}

impl TrajectoryRecord {
    pub fn to_box(&self) -> Box3D {
        Box3D::new(Vec3::from(self.center), self.dims, self.yaw)
    }
}

pub fn trajectory_records(state: &TrackState) -> Vec<TrajectoryRecord> {
    state
        .boxes
        .iter()
        .enumerate()
        .map(|(frame, b)| TrajectoryRecord {
            frame,
            center: [b.center.x, b.center.y, b.center.z],
            dims: b.dims,
            yaw: b.yaw,
            inliers: state.inliers[frame],
            lost: state.lost[frame],
        })
        .collect()
}

/// Trajectory file: run metadata plus one record per frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrajectoryFile {
    pub format: String,
    pub seed: u64,
    pub config_hash: String,
    /// Episode directory name within its dataset.
    pub episode: String,
    pub object: usize,
    pub records: Vec<TrajectoryRecord>,
}

pub const TRAJECTORY_FORMAT: &str = "trajectory1";

impl TrajectoryFile {
    pub fn parse(bytes: &[u8]) -> Result<Self, TrackError> {
        let t: TrajectoryFile =
            serde_json::from_slice(bytes).map_err(|e| TrackError::MalformedTrajectory(e.to_string()))?;
        if t.format != TRAJECTORY_FORMAT {
            return Err(TrackError::MalformedTrajectory(format!("unknown format {:?}", t.format)));
        }
        for (i, r) in t.records.iter().enumerate() {
            if r.frame != i {
                return Err(TrackError::MalformedTrajectory(format!("record {i} has frame {}", r.frame)));
            }
            if !r.to_box().is_valid() {
                return Err(TrackError::MalformedTrajectory(format!("record {i} has an invalid box")));
            }
        }
        Ok(t)
    }

    pub fn boxes(&self) -> Vec<Box3D> {
        self.records.iter().map(|r| r.to_box()).collect()
    }
}

/// CSV with columns `frame,cx,cy,cz,length,height,width,yaw,inliers,lost`.
pub fn write_trajectory_csv<W: Write>(mut w: W, records: &[TrajectoryRecord]) -> std::io::Result<()> {
    writeln!(w, "frame,cx,cy,cz,length,height,width,yaw,inliers,lost")?;
    for r in records {
        writeln!(
            w,
            "{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{},{}",
            r.frame, r.center[0], r.center[1], r.center[2], r.dims[0], r.dims[1], r.dims[2], r.yaw, r.inliers, r.lost
        )?;
    }
    Ok(())
}
