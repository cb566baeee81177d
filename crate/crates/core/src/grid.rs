//! Metric voxel grids: world/memory coordinate mapping, RGB-D voxelization,
//! trilinear sampling and `.vxg` serialization.

use crate::geom::{invert, unproject, CameraIntrinsics, RigidTransform, Vec3};
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum GridError {
    #[error("invalid grid spec: {0}")]
    InvalidSpec(String),
    #[error("coordinate ({0:.3}, {1:.3}, {2:.3}) is outside the grid")]
    OutOfBounds(f64, f64, f64),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("malformed grid file: {0}")]
    Malformed(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Placement and resolution of a voxel cube in the world.
///
/// `center` and `extent` live in the grid frame; `reference_pose` maps grid
/// frame coordinates to world coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub center: [f64; 3],
    pub extent: [f64; 3],
    pub resolution: [usize; 3],
    #[serde(default)]
    pub reference_pose: RigidTransform,
}

impl GridSpec {
    pub fn new(center: Vec3, extent: [f64; 3], resolution: [usize; 3]) -> Result<Self, GridError> {
        let spec = GridSpec {
            center: [center.x, center.y, center.z],
            extent,
            resolution,
            reference_pose: RigidTransform::identity(),
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<(), GridError> {
        for a in 0..3 {
            if !(self.extent[a] > 0.0) || !self.extent[a].is_finite() {
                return Err(GridError::InvalidSpec(format!("extent[{a}] = {}", self.extent[a])));
            }
            if self.resolution[a] == 0 {
                return Err(GridError::InvalidSpec(format!("resolution[{a}] = 0")));
            }
            if !self.center[a].is_finite() {
                return Err(GridError::InvalidSpec(format!("center[{a}] not finite")));
            }
        }
        if self.reference_pose.orthonormality_error() > 1e-6
            || !self.reference_pose.translation.iter().all(|v| v.is_finite())
        {
            return Err(GridError::InvalidSpec("reference pose is not a rigid transform".into()));
        }
        let cells = self
            .resolution
            .iter()
            .try_fold(1usize, |acc, &r| acc.checked_mul(r))
            .ok_or_else(|| GridError::InvalidSpec("voxel count overflows".into()))?;
        if cells > 1 << 28 {
            return Err(GridError::InvalidSpec(format!("{cells} voxels is too large")));
        }
        Ok(())
    }

    pub fn center(&self) -> Vec3 {
        Vec3::from(self.center)
    }

    pub fn voxel_size(&self) -> Vec3 {
        Vec3::new(
            self.extent[0] / self.resolution[0] as f64,
            self.extent[1] / self.resolution[1] as f64,
            self.extent[2] / self.resolution[2] as f64,
        )
    }

    pub fn num_voxels(&self) -> usize {
        self.resolution.iter().product()
    }

    /// Same cube, resolution scaled by `num / den` per axis.
    pub fn rescaled(&self, num: usize, den: usize) -> GridSpec {
        let mut s = *self;
        for r in s.resolution.iter_mut() {
            *r = (*r * num / den).max(1);
        }
        s
    }

    /// Continuous grid coordinate of a world point; voxel `(i, j, k)` has
    /// its center at integer coordinate `(i, j, k)`.
    pub fn world_to_mem(&self, p: &Vec3) -> Vec3 {
        let q = invert(&self.reference_pose).apply(p);
        let vs = self.voxel_size();
        let mut out = Vec3::zeros();
        for a in 0..3 {
            let origin = self.center[a] - self.extent[a] / 2.0;
            out[a] = (q[a] - origin) / vs[a] - 0.5;
        }
        out
    }

    pub fn mem_to_world(&self, c: &Vec3) -> Vec3 {
        let vs = self.voxel_size();
        let mut q = Vec3::zeros();
        for a in 0..3 {
            let origin = self.center[a] - self.extent[a] / 2.0;
            q[a] = origin + (c[a] + 0.5) * vs[a];
        }
        self.reference_pose.apply(&q)
    }

    pub fn voxel_center(&self, idx: [usize; 3]) -> Vec3 {
        self.mem_to_world(&Vec3::new(idx[0] as f64, idx[1] as f64, idx[2] as f64))
    }

    /// Index of the voxel containing a continuous coordinate, if inside.
    pub fn nearest_voxel(&self, c: &Vec3) -> Option<[usize; 3]> {
        let mut idx = [0usize; 3];
        for a in 0..3 {
            let r = c[a].round();
            if !(r >= 0.0) || r >= self.resolution[a] as f64 {
                return None;
            }
            idx[a] = r as usize;
        }
        Some(idx)
    }

    pub fn linear_index(&self, idx: [usize; 3]) -> usize {
        let [_, h, d] = self.resolution;
        (idx[0] * h + idx[1]) * d + idx[2]
    }

    pub fn unravel(&self, linear: usize) -> [usize; 3] {
        let [_, h, d] = self.resolution;
        [linear / (h * d), (linear / d) % h, linear % d]
    }
}

/// Extent and resolution of tracking search regions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SearchRegionConfig {
    pub extent: [f64; 3],
    pub resolution: [usize; 3],
}

impl Default for SearchRegionConfig {
    fn default() -> Self {
        SearchRegionConfig { extent: [16.0, 2.0, 16.0], resolution: [32, 4, 32] }
    }
}

impl SearchRegionConfig {
    /// Half the metric size and half the voxel counts of a full-scene grid,
    /// so voxel pitch is unchanged.
    pub fn half_of(full_scene: &GridSpec) -> Self {
        let mut extent = full_scene.extent;
        let mut resolution = full_scene.resolution;
        for a in 0..3 {
            extent[a] /= 2.0;
            resolution[a] = (resolution[a] / 2).max(1);
        }
        SearchRegionConfig { extent, resolution }
    }
}

/// World-aligned search cube centered on an object's last known position.
pub fn make_search_region(last_center: &Vec3, config: &SearchRegionConfig) -> GridSpec {
    GridSpec {
        center: [last_center.x, last_center.y, last_center.z],
        extent: config.extent,
        resolution: config.resolution,
        reference_pose: RigidTransform::identity(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OccupancySummary {
    pub occupied_count: usize,
    pub fraction: f64,
}

/// Dense `W x H x D x C` grid stored row-major with channels innermost.
#[derive(Debug, Clone, PartialEq)]
pub struct VoxelGrid {
    pub spec: GridSpec,
    pub channels: usize,
    pub data: Vec<f64>,
}

/// Channel layout of voxelized RGB-D input.
pub const INPUT_CHANNELS: usize = 4;
pub const OCCUPANCY_CHANNEL: usize = 3;

impl VoxelGrid {
    pub fn zeros(spec: GridSpec, channels: usize) -> Self {
        VoxelGrid { spec, channels, data: vec![0.0; spec.num_voxels() * channels] }
    }

    pub fn from_data(spec: GridSpec, channels: usize, data: Vec<f64>) -> Result<Self, GridError> {
        if data.len() != spec.num_voxels() * channels {
            return Err(GridError::ShapeMismatch(format!(
                "data length {} != {} voxels x {} channels",
                data.len(),
                spec.num_voxels(),
                channels
            )));
        }
        Ok(VoxelGrid { spec, channels, data })
    }

    pub fn dims(&self) -> [usize; 3] {
        self.spec.resolution
    }

    pub fn voxel(&self, idx: [usize; 3]) -> &[f64] {
        let o = self.spec.linear_index(idx) * self.channels;
        &self.data[o..o + self.channels]
    }

    pub fn voxel_mut(&mut self, idx: [usize; 3]) -> &mut [f64] {
        let o = self.spec.linear_index(idx) * self.channels;
        &mut self.data[o..o + self.channels]
    }

    pub fn voxel_linear(&self, linear: usize) -> &[f64] {
        &self.data[linear * self.channels..(linear + 1) * self.channels]
    }

    /// True where the occupancy channel of an input grid is set.
    pub fn occupied(&self, linear: usize) -> bool {
        self.data[linear * self.channels + OCCUPANCY_CHANNEL] > 0.5
    }

    pub fn occupancy_mask(&self) -> Vec<bool> {
        (0..self.spec.num_voxels()).map(|i| self.occupied(i)).collect()
    }

    pub fn occupancy_summary(&self) -> OccupancySummary {
        let occupied_count = (0..self.spec.num_voxels()).filter(|&i| self.occupied(i)).count();
        OccupancySummary { occupied_count, fraction: occupied_count as f64 / self.spec.num_voxels() as f64 }
    }

    pub fn trilinear_sample(&self, coord: &Vec3) -> Result<Vec<f64>, GridError> {
        let res = self.spec.resolution;
        for a in 0..3 {
            if !(coord[a] >= 0.0 && coord[a] <= (res[a] - 1) as f64) {
                return Err(GridError::OutOfBounds(coord.x, coord.y, coord.z));
            }
        }
        let mut lo = [0usize; 3];
        let mut frac = [0.0f64; 3];
        for a in 0..3 {
            let f = coord[a].floor();
            lo[a] = (f as usize).min(res[a].saturating_sub(2));
            frac[a] = coord[a] - lo[a] as f64;
        }
        let mut out = vec![0.0; self.channels];
        for corner in 0..8 {
            let mut idx = [0usize; 3];
            let mut w = 1.0;
            for a in 0..3 {
                let bit = (corner >> a) & 1;
                if res[a] == 1 {
                    if bit == 1 {
                        w = 0.0;
                    }
                    idx[a] = 0;
                    continue;
                }
                idx[a] = lo[a] + bit;
                w *= if bit == 1 { frac[a] } else { 1.0 - frac[a] };
            }
            if w == 0.0 {
                continue;
            }
            for (o, v) in out.iter_mut().zip(self.voxel(idx)) {
                *o += w * v;
            }
        }
        Ok(out)
    }

    /// Writes the `.vxg` format: one JSON header line, then little-endian
    /// `f32` values in `(W, H, D, C)` row-major order.
    pub fn write_to(&self, mut w: impl Write) -> Result<(), GridError> {
        let header = VxgHeader { format: VXG_MAGIC.to_string(), spec: self.spec, channels: self.channels };
        serde_json::to_writer(&mut w, &header).map_err(|e| GridError::Malformed(e.to_string()))?;
        w.write_all(b"\n")?;
        let mut buf = Vec::with_capacity(self.data.len() * 4);
        for v in &self.data {
            buf.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self, GridError> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        Self::from_vxg_bytes(&bytes)
    }

    pub fn from_vxg_bytes(bytes: &[u8]) -> Result<Self, GridError> {
        let nl =
            bytes.iter().position(|&b| b == b'\n').ok_or_else(|| GridError::Malformed("missing header line".into()))?;
        let header: VxgHeader =
            serde_json::from_slice(&bytes[..nl]).map_err(|e| GridError::Malformed(format!("header: {e}")))?;
        if header.format != VXG_MAGIC {
            return Err(GridError::Malformed(format!("unknown format tag {:?}", header.format)));
        }
        header.spec.validate()?;
        if header.channels == 0 || header.channels > 4096 {
            return Err(GridError::Malformed(format!("channel count {}", header.channels)));
        }
        let n = header.spec.num_voxels() * header.channels;
        let body = &bytes[nl + 1..];
        if body.len() != n * 4 {
            return Err(GridError::Malformed(format!("expected {} payload bytes, found {}", n * 4, body.len())));
        }
        let mut data = Vec::with_capacity(n);
        for chunk in body.chunks_exact(4) {
            let v = f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]);
            if !v.is_finite() {
                return Err(GridError::Malformed("non-finite value".into()));
            }
            data.push(v as f64);
        }
        VoxelGrid::from_data(header.spec, header.channels, data)
    }
}

const VXG_MAGIC: &str = "vxg1";

#[derive(Serialize, Deserialize)]
struct VxgHeader {
    format: String,
    spec: GridSpec,
    channels: usize,
}

/// One RGB-D frame: row-major `height x width` arrays, RGB in `[0, 1]` and
/// depth in meters with `0` marking pixels without a return.
#[derive(Debug, Clone, Copy)]
pub struct RgbdView<'a> {
    pub rgb: &'a [f32],
    pub depth: &'a [f32],
    pub intrinsics: &'a CameraIntrinsics,
    /// World-from-camera pose.
    pub pose: &'a RigidTransform,
}

/// Running sums used to fuse any number of frames into one input grid.
#[derive(Debug, Clone)]
pub struct Voxelizer {
    spec: GridSpec,
    color_sum: Vec<[f64; 3]>,
    hits: Vec<u32>,
}

impl Voxelizer {
    pub fn new(spec: GridSpec) -> Self {
        let n = spec.num_voxels();
        Voxelizer { spec, color_sum: vec![[0.0; 3]; n], hits: vec![0; n] }
    }

    /// Splats every valid pixel into its nearest voxel; points outside the
    /// cube are dropped.
    pub fn add_view(&mut self, view: &RgbdView<'_>) -> Result<(), GridError> {
        let k = view.intrinsics;
        let npx = k.width * k.height;
        if view.depth.len() != npx || view.rgb.len() != npx * 3 {
            return Err(GridError::ShapeMismatch(format!(
                "{}x{} image with {} depth and {} rgb values",
                k.width,
                k.height,
                view.depth.len(),
                view.rgb.len()
            )));
        }
        // world-from-camera then grid-from-world, fused into one transform
        let grid_from_cam = crate::geom::compose(&invert(&self.spec.reference_pose), view.pose);
        let vs = self.spec.voxel_size();
        let origin = Vec3::from(self.spec.center) - Vec3::from(self.spec.extent) / 2.0;
        for row in 0..k.height {
            for col in 0..k.width {
                let px = row * k.width + col;
                let d = view.depth[px] as f64;
                if !(d > 0.0) || !d.is_finite() {
                    continue;
                }
                let p_cam = unproject(k, col as f64 + 0.5, row as f64 + 0.5, d).expect("positive depth");
                let q = grid_from_cam.apply(&p_cam);
                let mut idx = [0usize; 3];
                let mut inside = true;
                for a in 0..3 {
                    let c = ((q[a] - origin[a]) / vs[a] - 0.5).round();
                    if !(c >= 0.0) || c >= self.spec.resolution[a] as f64 {
                        inside = false;
                        break;
                    }
                    idx[a] = c as usize;
                }
                if !inside {
                    continue;
                }
                let li = self.spec.linear_index(idx);
                self.hits[li] += 1;
                for ch in 0..3 {
                    self.color_sum[li][ch] += view.rgb[px * 3 + ch] as f64;
                }
            }
        }
        Ok(())
    }

    pub fn finish(self) -> VoxelGrid {
        let mut grid = VoxelGrid::zeros(self.spec, INPUT_CHANNELS);
        for (li, (&n, sum)) in self.hits.iter().zip(&self.color_sum).enumerate() {
            if n == 0 {
                continue;
            }
            let v = &mut grid.data[li * INPUT_CHANNELS..(li + 1) * INPUT_CHANNELS];
            for ch in 0..3 {
                v[ch] = sum[ch] / n as f64;
            }
            v[OCCUPANCY_CHANNEL] = 1.0;
        }
        if grid.occupancy_summary().occupied_count == 0 {
            log::warn!("voxelization produced an empty grid");
        }
        grid
    }
}

/// Voxelizes a single RGB-D frame into a 4-channel (RGB + occupancy) grid.
pub fn voxelize_rgbd(view: &RgbdView<'_>, spec: &GridSpec) -> Result<VoxelGrid, GridError> {
    let mut vox = Voxelizer::new(*spec);
    vox.add_view(view)?;
    Ok(vox.finish())
}

/// Fuses per-view input grids: occupancy is the voxel-wise max and color is
/// the mean over the grids that occupy the voxel.
pub fn fuse_input_grids(grids: &[VoxelGrid]) -> Result<VoxelGrid, GridError> {
    let first = grids.first().ok_or_else(|| GridError::ShapeMismatch("no grids to fuse".into()))?;
    let mut out = VoxelGrid::zeros(first.spec, INPUT_CHANNELS);
    for g in grids {
        if g.spec != first.spec || g.channels != INPUT_CHANNELS {
            return Err(GridError::ShapeMismatch("grids must share spec and layout".into()));
        }
    }
    for li in 0..first.spec.num_voxels() {
        let mut n = 0.0;
        let mut rgb = [0.0; 3];
        for g in grids {
            let v = g.voxel_linear(li);
            if v[OCCUPANCY_CHANNEL] > 0.5 {
                n += v[OCCUPANCY_CHANNEL];
                for ch in 0..3 {
                    rgb[ch] += v[OCCUPANCY_CHANNEL] * v[ch];
                }
            }
        }
        if n > 0.0 {
            let o = &mut out.data[li * INPUT_CHANNELS..(li + 1) * INPUT_CHANNELS];
            for ch in 0..3 {
                o[ch] = rgb[ch] / n;
            }
            o[OCCUPANCY_CHANNEL] = 1.0;
        }
    }
    Ok(out)
}
