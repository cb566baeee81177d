//! Procedural RGB-D worlds: a textured ground plane with upright boxes,
//! spheres and rigidly moving vehicles, raycast from several calibrated
//! cameras per frame.
//!
//! Episodes are stored as a directory holding `episode.json` (scene, camera
//! poses, ground-truth boxes) plus one pair of raw little-endian `f32` files
//! per frame and camera: `f{frame}_c{cam}_rgb.raw` (`H x W x 3`, row-major)
//! and `f{frame}_c{cam}_depth.raw` (`H x W`, meters, `0` = no return).

use crate::geom::{compose, invert, CameraIntrinsics, RigidTransform, Vec3};
use crate::grid::{GridError, GridSpec, RgbdView, VoxelGrid, Voxelizer};
use crate::track::Box3D;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("corrupt episode at {path}: {reason}")]
    CorruptEpisode { path: PathBuf, reason: String },
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("could not place scene objects after {0} attempts")]
    Placement(usize),
}

fn corrupt(path: &Path, reason: impl Into<String>) -> SimError {
    SimError::CorruptEpisode { path: path.to_path_buf(), reason: reason.into() }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Shape {
    /// Axis-aligned in the primitive frame, centered on its origin.
    Cuboid {
        half_extents: [f64; 3],
    },
    Sphere {
        radius: f64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Primitive {
    pub shape: Shape,
    /// Object-to-world placement.
    pub pose: RigidTransform,
    pub albedo: [f64; 3],
    pub texture_seed: u64,
    /// Lattice spacing of the procedural texture, meters.
    pub texture_scale: f64,
}

/// A rigid object with one object-to-world pose per frame. The primitive's
/// own `pose` is ignored.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mover {
    pub primitive: Primitive,
    pub trajectory: Vec<RigidTransform>,
}

impl Mover {
    pub fn box_at(&self, frame: usize) -> Box3D {
        let pose = self.trajectory[frame];
        let dims = match self.primitive.shape {
            Shape::Cuboid { half_extents: h } => [2.0 * h[0], 2.0 * h[1], 2.0 * h[2]],
            Shape::Sphere { radius } => [2.0 * radius; 3],
        };
        Box3D::new(pose.translation, dims, pose.yaw())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub intrinsics: CameraIntrinsics,
    /// World-from-camera pose used for rendering.
    pub pose: RigidTransform,
    /// Per-channel exposure gain applied to rendered colors.
    pub gain: [f64; 3],
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroundSpec {
    pub albedo: [f64; 3],
    pub texture_seed: u64,
    pub texture_scale: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub ground: GroundSpec,
    pub statics: Vec<Primitive>,
    pub movers: Vec<Mover>,
    /// `cameras[frame][camera]`.
    pub cameras: Vec<Vec<Camera>>,
    pub frame_count: usize,
    pub seed: u64,
    /// Unit direction toward the light.
    pub sun: [f64; 3],
}

/// Generator knobs; defaults describe the desk-scale benchmark world.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub image_width: usize,
    pub image_height: usize,
    pub hfov_degrees: f64,
    pub num_cameras: usize,
    pub frame_count: usize,
    pub static_frame_count: usize,
    pub camera_radius: f64,
    pub elevation_degrees: [f64; 2],
    /// Objects stay inside `[-h, h]` on both ground axes.
    pub scene_half_extent: f64,
    pub static_boxes: [usize; 2],
    pub spheres: [usize; 2],
    /// Parked vehicles in static episodes.
    pub parked_vehicles: [usize; 2],
    pub movers: [usize; 2],
    /// Vehicles of one episode share this many appearances; `0` gives each
    /// vehicle its own.
    pub vehicle_models: usize,
    /// Probability that a dynamic-episode vehicle actually moves.
    pub moving_probability: f64,
    /// Vehicle speed range, meters per frame.
    pub speed: [f64; 2],
    /// Maximum yaw rate, radians per frame.
    pub yaw_rate: f64,
    pub depth_noise_std: f64,
    pub pose_noise_std: f64,
    /// Half-width of the per-view multiplicative exposure jitter.
    pub gain_jitter: f64,
    /// Half-width of the extra per-view, per-channel gain jitter.
    pub white_balance_jitter: f64,
    /// Per-pixel Gaussian color noise.
    pub color_noise_std: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            image_width: 64,
            image_height: 64,
            hfov_degrees: 70.0,
            num_cameras: 4,
            frame_count: 9,
            static_frame_count: 4,
            camera_radius: 16.0,
            elevation_degrees: [25.0, 60.0],
            scene_half_extent: 10.0,
            static_boxes: [2, 4],
            spheres: [1, 3],
            parked_vehicles: [2, 4],
            movers: [2, 4],
            vehicle_models: 2,
            moving_probability: 0.7,
            speed: [0.5, 1.5],
            yaw_rate: 0.05,
            depth_noise_std: 0.0,
            pose_noise_std: 0.0,
            gain_jitter: 0.6,
            white_balance_jitter: 0.3,
            color_noise_std: 0.08,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EpisodeKind {
    Static,
    Dynamic,
}

/// Rendered frames of one camera at one timestep.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewImage {
    /// Recorded world-from-camera pose (may carry pose noise).
    pub pose: RigidTransform,
    pub rgb: Vec<f32>,
    pub depth: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub scene: SceneSpec,
    /// `views[frame][camera]`.
    pub views: Vec<Vec<ViewImage>>,
    /// `gt_boxes[mover][frame]`.
    pub gt_boxes: Vec<Vec<Box3D>>,
    pub is_static: bool,
}

impl Episode {
    pub fn frame_count(&self) -> usize {
        self.views.len()
    }

    pub fn camera_count(&self) -> usize {
        self.views.first().map_or(0, |v| v.len())
    }

    pub fn rgbd_view(&self, frame: usize, camera: usize) -> RgbdView<'_> {
        let v = &self.views[frame][camera];
        RgbdView {
            rgb: &v.rgb,
            depth: &v.depth,
            intrinsics: &self.scene.cameras[frame][camera].intrinsics,
            pose: &v.pose,
        }
    }

    /// Fuses the listed `(frame, camera)` views into one input grid.
    pub fn voxelize(&self, views: &[(usize, usize)], spec: &GridSpec) -> Result<VoxelGrid, GridError> {
        let mut vox = Voxelizer::new(*spec);
        for &(f, c) in views {
            vox.add_view(&self.rgbd_view(f, c))?;
        }
        Ok(vox.finish())
    }
}

// ---------------------------------------------------------------------------
// procedural texture

fn hash3(ix: i64, iy: i64, iz: i64, seed: u64) -> f64 {
    let mut h = seed
        ^ (ix as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ (iy as u64).wrapping_mul(0xC2B2_AE3D_27D4_EB4F)
        ^ (iz as u64).wrapping_mul(0x1656_67B1_9E37_79F9);
    // splitmix64 finalizer
    h = (h ^ (h >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    h = (h ^ (h >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    h ^= h >> 31;
    (h >> 11) as f64 / (1u64 << 53) as f64
}

/// Smoothly interpolated lattice noise in `[0, 1]`.
pub fn value_noise(p: &Vec3, seed: u64) -> f64 {
    let f = p.map(f64::floor);
    let t = (p - f).map(|x| x * x * (3.0 - 2.0 * x));
    let (ix, iy, iz) = (f.x as i64, f.y as i64, f.z as i64);
    let mut acc = 0.0;
    for corner in 0..8 {
        let (dx, dy, dz) = (corner & 1, (corner >> 1) & 1, (corner >> 2) & 1);
        let w = (if dx == 1 { t.x } else { 1.0 - t.x })
            * (if dy == 1 { t.y } else { 1.0 - t.y })
            * (if dz == 1 { t.z } else { 1.0 - t.z });
        acc += w * hash3(ix + dx, iy + dy, iz + dz, seed);
    }
    acc
}

fn texture(p_local: &Vec3, albedo: &[f64; 3], seed: u64, scale: f64) -> [f64; 3] {
    let q = p_local / scale;
    let mut out = [0.0; 3];
    for (k, o) in out.iter_mut().enumerate() {
        let s = seed.wrapping_add(k as u64 * 0x5851_F42D);
        let n = 0.65 * value_noise(&q, s) + 0.35 * value_noise(&(q * 2.3), s ^ 0xABCD);
        *o = albedo[k] * (0.25 + 0.75 * n);
    }
    out
}

// ---------------------------------------------------------------------------
// ray casting

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hit {
    /// Ray parameter of the hit.
    pub t: f64,
    pub point: Vec3,
    pub normal: Vec3,
    pub color: [f64; 3],
}

const MAX_RANGE: f64 = 200.0;

fn intersect_primitive(prim: &Primitive, pose: &RigidTransform, o: &Vec3, d: &Vec3) -> Option<(f64, Vec3, Vec3)> {
    let inv = invert(pose);
    let lo = inv.apply(o);
    let ld = inv.apply_vector(d);
    match prim.shape {
        Shape::Sphere { radius } => {
            let a = ld.dot(&ld);
            let b = lo.dot(&ld);
            let c = lo.dot(&lo) - radius * radius;
            let disc = b * b - a * c;
            if disc < 0.0 {
                return None;
            }
            let t = (-b - disc.sqrt()) / a;
            if t <= 1e-9 {
                return None;
            }
            let lp = lo + ld * t;
            Some((t, lp, pose.apply_vector(&(lp / radius))))
        }
        Shape::Cuboid { half_extents: h } => {
            let mut t_near = f64::NEG_INFINITY;
            let mut t_far = f64::INFINITY;
            let mut axis = 0;
            let mut sign = 1.0;
            for a in 0..3 {
                if ld[a].abs() < 1e-15 {
                    if lo[a].abs() > h[a] {
                        return None;
                    }
                    continue;
                }
                let t1 = (-h[a] - lo[a]) / ld[a];
                let t2 = (h[a] - lo[a]) / ld[a];
                let (tn, tf, s) = if t1 < t2 { (t1, t2, -1.0) } else { (t2, t1, 1.0) };
                if tn > t_near {
                    t_near = tn;
                    axis = a;
                    sign = s;
                }
                t_far = t_far.min(tf);
            }
            if t_near > t_far || t_near <= 1e-9 {
                return None;
            }
            let lp = lo + ld * t_near;
            let mut n = Vec3::zeros();
            n[axis] = sign;
            Some((t_near, lp, pose.apply_vector(&n)))
        }
    }
}

impl SceneSpec {
    /// Nearest surface hit along `origin + t * dir`, `t > 0`, within
    /// `MAX_RANGE` meters of the origin.
    pub fn cast_ray(&self, frame: usize, origin: &Vec3, dir: &Vec3) -> Option<Hit> {
        let mut best: Option<Hit> = None;
        let max_t = MAX_RANGE / dir.norm();
        let mut consider = |t: f64, point: Vec3, normal: Vec3, color: [f64; 3]| {
            if t < max_t && best.map_or(true, |b| t < b.t) {
                best = Some(Hit { t, point, normal, color });
            }
        };
        if dir.y < 0.0 && origin.y > 0.0 {
            let t = -origin.y / dir.y;
            let mut p = origin + dir * t;
            p.y = 0.0;
            let g = &self.ground;
            consider(t, p, Vec3::y(), texture(&p, &g.albedo, g.texture_seed, g.texture_scale));
        }
        for prim in &self.statics {
            if let Some((t, lp, n)) = intersect_primitive(prim, &prim.pose, origin, dir) {
                let c = texture(&lp, &prim.albedo, prim.texture_seed, prim.texture_scale);
                consider(t, origin + dir * t, n, c);
            }
        }
        for m in &self.movers {
            let pose = &m.trajectory[frame];
            if let Some((t, lp, n)) = intersect_primitive(&m.primitive, pose, origin, dir) {
                let c = texture(&lp, &m.primitive.albedo, m.primitive.texture_seed, m.primitive.texture_scale);
                consider(t, origin + dir * t, n, c);
            }
        }
        best
    }

    fn shade(&self, hit: &Hit) -> [f64; 3] {
        let sun = Vec3::from(self.sun);
        let lambert = hit.normal.dot(&sun).max(0.0);
        let s = 0.55 + 0.45 * lambert;
        hit.color.map(|c| (c * s).clamp(0.0, 1.0))
    }
}

/// Raycasts one camera at one frame. Returns row-major RGB (`H x W x 3`)
/// and camera-frame depth (`H x W`, `0` where the ray escapes).
pub fn render_view(scene: &SceneSpec, frame: usize, camera: &Camera) -> (Vec<f64>, Vec<f64>) {
    let k = &camera.intrinsics;
    let mut rgb = vec![0.0; k.width * k.height * 3];
    let mut depth = vec![0.0; k.width * k.height];
    let origin = camera.pose.translation;
    for row in 0..k.height {
        for col in 0..k.width {
            // unit-z camera ray, so the ray parameter equals camera depth
            let d_cam = Vec3::new((col as f64 + 0.5 - k.cx) / k.fx, (row as f64 + 0.5 - k.cy) / k.fy, 1.0);
            let dir = camera.pose.apply_vector(&d_cam);
            if let Some(hit) = scene.cast_ray(frame, &origin, &dir) {
                let px = row * k.width + col;
                depth[px] = hit.t;
                let c = scene.shade(&hit);
                for ch in 0..3 {
                    rgb[px * 3 + ch] = (c[ch] * camera.gain[ch]).clamp(0.0, 1.0);
                }
            }
        }
    }
    (rgb, depth)
}

// ---------------------------------------------------------------------------
// scene generation

#[derive(Debug, Clone, Copy)]
struct Disc {
    x: f64,
    z: f64,
    r: f64,
}

impl Disc {
    fn overlaps(&self, o: &Disc, margin: f64) -> bool {
        let dx = self.x - o.x;
        let dz = self.z - o.z;
        (dx * dx + dz * dz).sqrt() < self.r + o.r + margin
    }
}

fn random_albedo(rng: &mut ChaCha8Rng) -> [f64; 3] {
    [rng.gen_range(0.2..1.0), rng.gen_range(0.2..1.0), rng.gen_range(0.2..1.0)]
}

fn vehicle_half_extents(rng: &mut ChaCha8Rng) -> [f64; 3] {
    [rng.gen_range(1.75..2.4), 0.75, rng.gen_range(0.85..1.05)]
}

fn sample_count(rng: &mut ChaCha8Rng, range: [usize; 2]) -> usize {
    if range[1] <= range[0] {
        range[0]
    } else {
        rng.gen_range(range[0]..=range[1])
    }
}

const PLACEMENT_ATTEMPTS: usize = 200;
const CLEARANCE: f64 = 0.5;
/// Gap between a mover and static geometry: more than the footprint
/// diagonal of a 0.5 m voxel, so no voxel of such a grid holds both.
const MOVER_STATIC_CLEARANCE: f64 = 0.75;

/// Two discs covering the footprint of a vehicle, one per half.
fn vehicle_discs(center: &Vec3, heading: f64, half: [f64; 3]) -> [Disc; 2] {
    let off = half[0] / 2.0;
    let r = off.hypot(half[2]);
    let (c, s) = (heading.cos(), -heading.sin());
    [-1.0, 1.0].map(|k| Disc { x: center.x + k * off * c, z: center.z + k * off * s, r })
}

fn place(rng: &mut ChaCha8Rng, r: f64, half: f64, taken: &[Disc]) -> Option<Disc> {
    for _ in 0..PLACEMENT_ATTEMPTS {
        let lim = (half - r).max(0.0);
        let d = Disc { x: rng.gen_range(-lim..=lim), z: rng.gen_range(-lim..=lim), r };
        if taken.iter().all(|t| !d.overlaps(t, CLEARANCE)) {
            return Some(d);
        }
    }
    None
}

fn make_rig(cfg: &SimConfig, rng: &mut ChaCha8Rng) -> Vec<Vec<Camera>> {
    let intr = CameraIntrinsics::from_fov(cfg.image_width, cfg.image_height, cfg.hfov_degrees.to_radians());
    // 18 anchor viewpoints: 6 azimuths x 3 elevations
    let [el_lo, el_hi] = cfg.elevation_degrees;
    let mut anchors: Vec<(f64, f64)> = Vec::new();
    for a in 0..6 {
        for e in 0..3 {
            let el = el_lo + (el_hi - el_lo) * e as f64 / 2.0;
            anchors.push((a as f64 * 60.0, el));
        }
    }
    anchors.shuffle(rng);
    let chosen: Vec<(f64, f64)> = anchors.into_iter().cycle().take(cfg.num_cameras).collect();
    (0..cfg.frame_count)
        .map(|_| {
            chosen
                .iter()
                .map(|&(az, el)| {
                    // per-frame exposure and white balance
                    let (j, wb) = (cfg.gain_jitter, cfg.white_balance_jitter);
                    let base = if j > 0.0 { rng.gen_range(1.0 - j..1.0 + j) } else { 1.0 };
                    let gain =
                        [0, 1, 2].map(|_| if wb > 0.0 { base * rng.gen_range(1.0 - wb..1.0 + wb) } else { base });
                    let az = (az + rng.gen_range(-10.0..10.0)).to_radians();
                    let el = (el + rng.gen_range(-5.0..5.0)).to_radians();
                    let r = cfg.camera_radius * rng.gen_range(0.9..1.1);
                    let eye = Vec3::new(r * el.cos() * az.cos(), r * el.sin(), r * el.cos() * az.sin());
                    let target = Vec3::new(rng.gen_range(-2.0..2.0), 0.0, rng.gen_range(-2.0..2.0));
                    Camera { intrinsics: intr, pose: RigidTransform::look_at(eye, target, Vec3::y()), gain }
                })
                .collect()
        })
        .collect()
}

fn vehicle(rng: &mut ChaCha8Rng, half: [f64; 3], models: &[Primitive]) -> Primitive {
    if !models.is_empty() {
        let mut p = models[rng.gen_range(0..models.len())].clone();
        p.shape = Shape::Cuboid { half_extents: half };
        return p;
    }
    Primitive {
        shape: Shape::Cuboid { half_extents: half },
        pose: RigidTransform::identity(),
        albedo: random_albedo(rng),
        texture_seed: rng.gen(),
        texture_scale: rng.gen_range(0.6..1.2),
    }
}

/// Samples a scene layout; statics and movers never overlap on the ground.
pub fn generate_scene(kind: EpisodeKind, seed: u64, cfg: &SimConfig) -> Result<SceneSpec, SimError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let half = cfg.scene_half_extent;
    let frames = match kind {
        EpisodeKind::Static => cfg.static_frame_count.max(1),
        EpisodeKind::Dynamic => cfg.frame_count.max(1),
    };
    let ground = GroundSpec {
        albedo: [rng.gen_range(0.5..1.0), rng.gen_range(0.5..1.0), rng.gen_range(0.5..1.0)],
        texture_seed: rng.gen(),
        texture_scale: rng.gen_range(0.8..1.5),
    };
    let models: Vec<Primitive> = (0..cfg.vehicle_models).map(|_| vehicle(&mut rng, [1.0; 3], &[])).collect();
    let mut taken: Vec<Disc> = Vec::new();
    let mut statics = Vec::new();

    for _ in 0..sample_count(&mut rng, cfg.static_boxes) {
        let h: [f64; 3] = [rng.gen_range(0.5..1.5), rng.gen_range(0.4..1.25), rng.gen_range(0.5..1.5)];
        let r = (h[0] * h[0] + h[2] * h[2]).sqrt();
        if let Some(d) = place(&mut rng, r, half, &taken) {
            taken.push(d);
            statics.push(Primitive {
                shape: Shape::Cuboid { half_extents: h },
                pose: RigidTransform::from_yaw(rng.gen_range(-PI..PI), Vec3::new(d.x, h[1], d.z)),
                albedo: random_albedo(&mut rng),
                texture_seed: rng.gen(),
                texture_scale: rng.gen_range(0.5..1.2),
            });
        }
    }
    for _ in 0..sample_count(&mut rng, cfg.spheres) {
        let radius = rng.gen_range(0.5..1.0);
        if let Some(d) = place(&mut rng, radius, half, &taken) {
            taken.push(d);
            statics.push(Primitive {
                shape: Shape::Sphere { radius },
                pose: RigidTransform::from_translation(Vec3::new(d.x, radius, d.z)),
                albedo: random_albedo(&mut rng),
                texture_seed: rng.gen(),
                texture_scale: rng.gen_range(0.4..0.9),
            });
        }
    }

    let mut movers = Vec::new();
    match kind {
        EpisodeKind::Static => {
            for _ in 0..sample_count(&mut rng, cfg.parked_vehicles) {
                let h = vehicle_half_extents(&mut rng);
                let r = (h[0] * h[0] + h[2] * h[2]).sqrt();
                if let Some(d) = place(&mut rng, r, half, &taken) {
                    taken.push(d);
                    let mut p = vehicle(&mut rng, h, &models);
                    p.pose = RigidTransform::from_yaw(rng.gen_range(-PI..PI), Vec3::new(d.x, h[1], d.z));
                    statics.push(p);
                }
            }
        }
        EpisodeKind::Dynamic => {
            let n = sample_count(&mut rng, cfg.movers).max(1);
            // per-frame discs of already placed movers
            let mut mover_discs: Vec<Vec<[Disc; 2]>> = Vec::new();
            let mut attempts = 0;
            let mut slots = n;
            // drawn once per slot so rejections do not favour parked movers
            let mut slot_moving: Option<bool> = None;
            while movers.len() < slots {
                attempts += 1;
                if attempts > PLACEMENT_ATTEMPTS {
                    match slot_moving {
                        // a parked vehicle fits far more easily
                        Some(true) if movers.is_empty() => slot_moving = Some(false),
                        _ if movers.is_empty() => return Err(SimError::Placement(attempts)),
                        _ => {
                            slots -= 1;
                            slot_moving = None;
                        }
                    }
                    attempts = 0;
                    continue;
                }
                let h = vehicle_half_extents(&mut rng);
                let r = (h[0] * h[0] + h[2] * h[2]).sqrt();
                let moving = *slot_moving.get_or_insert_with(|| rng.gen_bool(cfg.moving_probability.clamp(0.0, 1.0)));
                let speed = if moving { rng.gen_range(cfg.speed[0]..=cfg.speed[1]) } else { 0.0 };
                let yaw_rate =
                    if moving && cfg.yaw_rate > 0.0 { rng.gen_range(-cfg.yaw_rate..cfg.yaw_rate) } else { 0.0 };
                // path relative to its start, then shifted so it fits the scene
                let lim = half - r;
                let mut heading: f64 = rng.gen_range(-PI..PI);
                let mut rel = Vec::with_capacity(frames);
                let mut headings = Vec::with_capacity(frames);
                let mut p = Vec3::zeros();
                for f in 0..frames {
                    if f > 0 {
                        heading += yaw_rate;
                        p += Vec3::new(heading.cos(), 0.0, -heading.sin()) * speed;
                    }
                    rel.push(p);
                    headings.push(heading);
                }
                let (min_x, max_x) = rel.iter().fold((0.0f64, 0.0f64), |(lo, hi), q| (lo.min(q.x), hi.max(q.x)));
                let (min_z, max_z) = rel.iter().fold((0.0f64, 0.0f64), |(lo, hi), q| (lo.min(q.z), hi.max(q.z)));
                let (x_lo, x_hi) = (-lim - min_x, lim - max_x);
                let (z_lo, z_hi) = (-lim - min_z, lim - max_z);
                if !(x_lo < x_hi && z_lo < z_hi) {
                    continue;
                }
                let start = Vec3::new(rng.gen_range(x_lo..x_hi), h[1], rng.gen_range(z_lo..z_hi));
                let mut trajectory = Vec::with_capacity(frames);
                let mut discs = Vec::with_capacity(frames);
                let mut ok = true;
                for f in 0..frames {
                    let pos = start + rel[f];
                    let d = vehicle_discs(&pos, headings[f], h);
                    let near = |o: &Disc, gap: f64| d.iter().any(|a| a.overlaps(o, gap));
                    if taken.iter().any(|o| near(o, MOVER_STATIC_CLEARANCE))
                        || mover_discs.iter().any(|md| md[f].iter().any(|o| near(o, CLEARANCE)))
                    {
                        ok = false;
                        break;
                    }
                    trajectory.push(RigidTransform::from_yaw(headings[f], pos));
                    discs.push(d);
                }
                if !ok {
                    continue;
                }
                slot_moving = None;
                attempts = 0;
                movers.push(Mover { primitive: vehicle(&mut rng, h, &models), trajectory });
                mover_discs.push(discs);
            }
        }
    }

    let cameras = make_rig(&SimConfig { frame_count: frames, ..cfg.clone() }, &mut rng);
    let sun = Vec3::new(rng.gen_range(-0.5..0.5), 1.0, rng.gen_range(-0.5..0.5)).normalize();
    Ok(SceneSpec { ground, statics, movers, cameras, frame_count: frames, seed, sun: [sun.x, sun.y, sun.z] })
}

/// Renders every camera of every frame of a scene.
pub fn render_episode(scene: SceneSpec, cfg: &SimConfig) -> Episode {
    let mut noise_rng = ChaCha8Rng::seed_from_u64(scene.seed ^ 0x0BAD_5EED);
    let depth_noise = Normal::new(0.0, cfg.depth_noise_std.max(0.0)).expect("finite std");
    let pose_noise = Normal::new(0.0, cfg.pose_noise_std.max(0.0)).expect("finite std");
    let color_noise = Normal::new(0.0, cfg.color_noise_std.max(0.0)).expect("finite std");
    let views = (0..scene.frame_count)
        .map(|f| {
            scene.cameras[f]
                .iter()
                .map(|cam| {
                    let (rgb, depth) = render_view(&scene, f, cam);
                    let depth: Vec<f32> = depth
                        .iter()
                        .map(|&d| {
                            if d > 0.0 && cfg.depth_noise_std > 0.0 {
                                (d + depth_noise.sample(&mut noise_rng)).max(1e-3) as f32
                            } else {
                                d as f32
                            }
                        })
                        .collect();
                    let pose = if cfg.pose_noise_std > 0.0 {
                        let delta = RigidTransform::from_translation(Vec3::new(
                            pose_noise.sample(&mut noise_rng),
                            pose_noise.sample(&mut noise_rng),
                            pose_noise.sample(&mut noise_rng),
                        ));
                        compose(&delta, &cam.pose)
                    } else {
                        cam.pose
                    };
                    ViewImage {
                        pose,
                        rgb: rgb
                            .iter()
                            .map(|&c| {
                                if cfg.color_noise_std > 0.0 {
                                    (c + color_noise.sample(&mut noise_rng)).clamp(0.0, 1.0) as f32
                                } else {
                                    c as f32
                                }
                            })
                            .collect(),
                        depth,
                    }
                })
                .collect()
        })
        .collect();
    let gt_boxes = scene.movers.iter().map(|m| (0..scene.frame_count).map(|f| m.box_at(f)).collect()).collect();
    Episode { is_static: scene.movers.is_empty(), scene, views, gt_boxes }
}

pub fn generate_episode(kind: EpisodeKind, seed: u64, cfg: &SimConfig) -> Result<Episode, SimError> {
    let scene = generate_scene(kind, seed, cfg)?;
    let mut ep = render_episode(scene, cfg);
    ep.is_static = kind == EpisodeKind::Static;
    Ok(ep)
}

// ---------------------------------------------------------------------------
// episode directory IO

const EPISODE_FORMAT: &str = "episode1";
const EPISODE_FILE: &str = "episode.json";
const MAX_IMAGE_SIDE: usize = 8192;
const MAX_VIEWS: usize = 1 << 16;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeHeader {
    pub format: String,
    pub is_static: bool,
    pub scene: SceneSpec,
    pub gt_boxes: Vec<Vec<Box3D>>,
    /// Recorded poses, `[frame][camera]`.
    pub poses: Vec<Vec<RigidTransform>>,
}

impl EpisodeHeader {
    /// Parses and validates `episode.json` contents.
    pub fn parse(bytes: &[u8], path: &Path) -> Result<Self, SimError> {
        let h: EpisodeHeader =
            serde_json::from_slice(bytes).map_err(|e| corrupt(path, format!("episode.json: {e}")))?;
        if h.format != EPISODE_FORMAT {
            return Err(corrupt(path, format!("unknown format {:?}", h.format)));
        }
        let f = h.scene.frame_count;
        if f == 0 || h.scene.cameras.len() != f || h.poses.len() != f {
            return Err(corrupt(path, "frame count disagrees with camera or pose lists"));
        }
        let ncam = h.scene.cameras[0].len();
        if f.saturating_mul(ncam) > MAX_VIEWS {
            return Err(corrupt(path, "too many views"));
        }
        for (cams, poses) in h.scene.cameras.iter().zip(&h.poses) {
            if cams.len() != ncam || poses.len() != ncam {
                return Err(corrupt(path, "camera count varies across frames"));
            }
            for c in cams {
                let k = &c.intrinsics;
                if !k.is_valid() || k.width > MAX_IMAGE_SIDE || k.height > MAX_IMAGE_SIDE {
                    return Err(corrupt(path, "invalid camera intrinsics"));
                }
            }
        }
        if h.scene.movers.iter().any(|m| m.trajectory.len() != f) {
            return Err(corrupt(path, "mover trajectory length disagrees with frame count"));
        }
        if h.gt_boxes.len() != h.scene.movers.len() || h.gt_boxes.iter().any(|b| b.len() != f) {
            return Err(corrupt(path, "ground-truth boxes disagree with movers"));
        }
        Ok(h)
    }
}

fn raw_name(frame: usize, cam: usize, what: &str) -> String {
    format!("f{frame}_c{cam}_{what}.raw")
}

fn write_f32s(path: &Path, values: &[f32]) -> Result<(), SimError> {
    let mut buf = Vec::with_capacity(values.len() * 4);
    for v in values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    std::fs::write(path, buf).map_err(|source| SimError::Io { path: path.to_path_buf(), source })
}

fn read_f32s(path: &Path, expected: usize) -> Result<Vec<f32>, SimError> {
    let bytes = std::fs::read(path).map_err(|source| SimError::Io { path: path.to_path_buf(), source })?;
    decode_f32s(&bytes, expected).map_err(|reason| corrupt(path, reason))
}

/// Decodes a raw little-endian `f32` buffer of exactly `expected` values.
pub fn decode_f32s(bytes: &[u8], expected: usize) -> Result<Vec<f32>, String> {
    if bytes.len() != expected * 4 {
        return Err(format!("expected {} bytes, found {}", expected * 4, bytes.len()));
    }
    Ok(bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect())
}

pub fn write_episode(dir: &Path, ep: &Episode) -> Result<(), SimError> {
    std::fs::create_dir_all(dir).map_err(|source| SimError::Io { path: dir.to_path_buf(), source })?;
    let header = EpisodeHeader {
        format: EPISODE_FORMAT.into(),
        is_static: ep.is_static,
        scene: ep.scene.clone(),
        gt_boxes: ep.gt_boxes.clone(),
        poses: ep.views.iter().map(|f| f.iter().map(|v| v.pose).collect()).collect(),
    };
    let json = serde_json::to_vec_pretty(&header).expect("episode header serializes");
    let path = dir.join(EPISODE_FILE);
    std::fs::write(&path, json).map_err(|source| SimError::Io { path, source })?;
    for (f, frame) in ep.views.iter().enumerate() {
        for (c, v) in frame.iter().enumerate() {
            write_f32s(&dir.join(raw_name(f, c, "rgb")), &v.rgb)?;
            write_f32s(&dir.join(raw_name(f, c, "depth")), &v.depth)?;
        }
    }
    Ok(())
}

pub fn read_episode(dir: &Path) -> Result<Episode, SimError> {
    let path = dir.join(EPISODE_FILE);
    let bytes = std::fs::read(&path).map_err(|source| SimError::Io { path: path.clone(), source })?;
    let header = EpisodeHeader::parse(&bytes, &path)?;
    let mut views = Vec::with_capacity(header.scene.frame_count);
    for (f, cams) in header.scene.cameras.iter().enumerate() {
        let mut frame = Vec::with_capacity(cams.len());
        for (c, cam) in cams.iter().enumerate() {
            let npx = cam.intrinsics.width * cam.intrinsics.height;
            let rgb = read_f32s(&dir.join(raw_name(f, c, "rgb")), npx * 3)?;
            let depth = read_f32s(&dir.join(raw_name(f, c, "depth")), npx)?;
            frame.push(ViewImage { pose: header.poses[f][c], rgb, depth });
        }
        views.push(frame);
    }
    Ok(Episode { scene: header.scene, views, gt_boxes: header.gt_boxes, is_static: header.is_static })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::unproject;

    fn empty_scene(cameras: Vec<Camera>) -> SceneSpec {
        SceneSpec {
            ground: GroundSpec { albedo: [0.5; 3], texture_seed: 1, texture_scale: 1.0 },
            statics: vec![],
            movers: vec![],
            cameras: vec![cameras],
            frame_count: 1,
            seed: 0,
            sun: [0.0, 1.0, 0.0],
        }
    }

    fn camera(eye: Vec3, target: Vec3, up: Vec3) -> Camera {
        Camera {
            intrinsics: CameraIntrinsics::from_fov(17, 17, 1.0),
            pose: RigidTransform::look_at(eye, target, up),
            gain: [1.0; 3],
        }
    }

    #[test]
    fn sky_has_no_depth() {
        let cam = camera(Vec3::new(0.0, 2.0, 0.0), Vec3::new(0.0, 50.0, 1.0), Vec3::z());
        let scene = empty_scene(vec![cam]);
        let (rgb, depth) = render_view(&scene, 0, &cam);
        assert!(depth.iter().all(|&d| d == 0.0));
        assert!(rgb.iter().all(|&c| c == 0.0));
    }

    #[test]
    fn looking_down_sees_plane_at_height() {
        let h = 3.5;
        let cam = camera(Vec3::new(1.0, h, -2.0), Vec3::new(1.0, 0.0, -2.0), Vec3::z());
        let scene = empty_scene(vec![cam]);
        let (_, depth) = render_view(&scene, 0, &cam);
        for d in depth {
            assert!((d - h).abs() < 1e-9, "{d}");
        }
    }

    #[test]
    fn sphere_on_axis() {
        let d = 7.0;
        // odd image width puts a pixel center exactly on the optical axis
        let cam = camera(Vec3::new(0.0, 5.0, 0.0), Vec3::new(0.0, 5.0, 1.0), Vec3::y());
        let mut scene = empty_scene(vec![cam]);
        scene.statics.push(Primitive {
            shape: Shape::Sphere { radius: 1.0 },
            pose: RigidTransform::from_translation(Vec3::new(0.0, 5.0, d)),
            albedo: [1.0; 3],
            texture_seed: 3,
            texture_scale: 1.0,
        });
        let mut k = cam.intrinsics;
        k.cx = 8.5;
        k.cy = 8.5;
        let cam = Camera { intrinsics: k, ..cam };
        let (_, depth) = render_view(&scene, 0, &cam);
        assert!((depth[8 * 17 + 8] - (d - 1.0)).abs() < 1e-6);
    }

    #[test]
    fn generation_is_deterministic() {
        let cfg = SimConfig { image_width: 16, image_height: 16, ..SimConfig::default() };
        let a = generate_episode(EpisodeKind::Dynamic, 11, &cfg).unwrap();
        let b = generate_episode(EpisodeKind::Dynamic, 11, &cfg).unwrap();
        assert_eq!(a, b);
        let c = generate_episode(EpisodeKind::Dynamic, 12, &cfg).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn static_episode_has_no_movers() {
        let cfg = SimConfig { image_width: 16, image_height: 16, ..SimConfig::default() };
        let ep = generate_episode(EpisodeKind::Static, 5, &cfg).unwrap();
        assert!(ep.is_static);
        assert!(ep.scene.movers.is_empty());
        assert!(ep.gt_boxes.is_empty());
        assert!(ep.camera_count() >= 2);
    }

    #[test]
    fn dynamic_boxes_follow_trajectories() {
        let cfg = SimConfig::default();
        let scene = generate_scene(EpisodeKind::Dynamic, 21, &cfg).unwrap();
        assert!(!scene.movers.is_empty());
        for m in &scene.movers {
            for f in 1..scene.frame_count {
                let b0 = m.box_at(f - 1);
                let b1 = m.box_at(f);
                let disp = b1.center - b0.center;
                let traj = m.trajectory[f].translation - m.trajectory[f - 1].translation;
                assert_eq!(disp, traj);
            }
        }
    }

    #[test]
    fn rendered_depth_reintersects() {
        let cfg = SimConfig { image_width: 24, image_height: 24, ..SimConfig::default() };
        let scene = generate_scene(EpisodeKind::Dynamic, 3, &cfg).unwrap();
        let cam = scene.cameras[2][1];
        let (_, depth) = render_view(&scene, 2, &cam);
        for row in 0..24 {
            for col in 0..24 {
                let d = depth[row * 24 + col];
                if d <= 0.0 {
                    continue;
                }
                let p = cam.pose.apply(&unproject(&cam.intrinsics, col as f64 + 0.5, row as f64 + 0.5, d).unwrap());
                let o = cam.pose.translation;
                let dir = (p - o).normalize();
                let hit = scene.cast_ray(2, &o, &dir).unwrap();
                assert!((hit.point - p).norm() < 1e-6);
            }
        }
    }

    #[test]
    fn episode_round_trip_and_corruption() {
        let cfg = SimConfig { image_width: 8, image_height: 6, frame_count: 2, ..SimConfig::default() };
        let ep = generate_episode(EpisodeKind::Dynamic, 4, &cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_episode(dir.path(), &ep).unwrap();
        let back = read_episode(dir.path()).unwrap();
        assert_eq!(back, ep);

        // truncated depth file
        let depth = dir.path().join("f1_c0_depth.raw");
        let bytes = std::fs::read(&depth).unwrap();
        std::fs::write(&depth, &bytes[..bytes.len() - 3]).unwrap();
        match read_episode(dir.path()) {
            Err(SimError::CorruptEpisode { path, .. }) => assert_eq!(path, depth),
            other => panic!("{other:?}"),
        }
        std::fs::write(&depth, &bytes).unwrap();

        // header claims a different image size
        let json = dir.path().join("episode.json");
        let text = std::fs::read_to_string(&json).unwrap();
        let mut header: serde_json::Value = serde_json::from_str(&text).unwrap();
        header["scene"]["cameras"][0][0]["intrinsics"]["width"] = serde_json::json!(9);
        std::fs::write(&json, serde_json::to_vec(&header).unwrap()).unwrap();
        assert!(matches!(read_episode(dir.path()), Err(SimError::CorruptEpisode { .. })));
    }
}
