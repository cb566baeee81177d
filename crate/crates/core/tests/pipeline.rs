use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use voxtrack::eval::iou_3d;
use voxtrack::geom::{invert, project, unproject, Vec3};
use voxtrack::grid::{make_search_region, GridSpec, SearchRegionConfig, VoxelGrid};
use voxtrack::learn::{
    oracle_static_mask, reliability_accuracy, sample_static_correspondences, train_stage1, train_stage2_reliability,
    train_stage3_finetune, ReliabilityParams, StaticSelection, TrainConfig,
};
use voxtrack::net::{EncoderParams, EncoderSpec};
use voxtrack::sim::{
    generate_episode, generate_scene, render_episode, render_view, Episode, EpisodeKind, GroundSpec, Primitive,
    SceneSpec, Shape, SimConfig,
};
use voxtrack::track::{scene_grid, track_sequence, Box3D, TrackerConfig};

fn small_sim() -> SimConfig {
    SimConfig { image_width: 32, image_height: 32, ..SimConfig::default() }
}

fn tiny_train() -> TrainConfig {
    TrainConfig {
        encoder: EncoderSpec::tiny(),
        crop: SearchRegionConfig { extent: [8.0, 2.0, 8.0], resolution: [16, 4, 16] },
        crop_center_range: 3.0,
        pairs_per_batch: 128,
        dictionary_capacity: 1024,
        negatives_per_positive: 128,
        cameras_per_view: 2,
        ..TrainConfig::default()
    }
}

fn episodes(kind: EpisodeKind, seeds: std::ops::Range<u64>, cfg: &SimConfig) -> Vec<Episode> {
    seeds.map(|s| generate_episode(kind, s, cfg).unwrap()).collect()
}

fn primitive_box(p: &Primitive) -> Box3D {
    let dims = match p.shape {
        Shape::Cuboid { half_extents: h } => [2.0 * h[0], 2.0 * h[1], 2.0 * h[2]],
        Shape::Sphere { radius } => [2.0 * radius; 3],
    };
    Box3D::new(p.pose.translation, dims, p.pose.yaw())
}

#[test]
fn static_surface_points_agree_across_cameras() {
    let scene = generate_scene(EpisodeKind::Static, 3, &small_sim()).unwrap();
    let cams = &scene.cameras[0];
    let mut agreed = 0usize;
    let mut checked = 0usize;
    for (a, cam_a) in cams.iter().enumerate() {
        let (_, depth) = render_view(&scene, 0, cam_a);
        let k = cam_a.intrinsics;
        for (b, cam_b) in cams.iter().enumerate() {
            if a == b {
                continue;
            }
            let to_b = invert(&cam_b.pose);
            for row in (0..k.height).step_by(3) {
                for col in (0..k.width).step_by(3) {
                    let d = depth[row * k.width + col];
                    if d <= 0.0 {
                        continue;
                    }
                    let p = cam_a.pose.apply(&unproject(&k, col as f64 + 0.5, row as f64 + 0.5, d).unwrap());
                    let Ok((u, v, _)) = project(&cam_b.intrinsics, &to_b.apply(&p)) else {
                        continue;
                    };
                    if u < 0.0 || v < 0.0 || u >= cam_b.intrinsics.width as f64 || v >= cam_b.intrinsics.height as f64 {
                        continue;
                    }
                    let origin = cam_b.pose.translation;
                    let dist = (p - origin).norm();
                    let hit =
                        scene.cast_ray(0, &origin, &((p - origin) / dist)).expect("ray toward a surface point hits");
                    checked += 1;
                    assert!(hit.t <= dist + 1e-6, "camera {b} sees through the surface seen by camera {a}");
                    if (hit.point - p).norm() < 1e-6 {
                        agreed += 1;
                    }
                }
            }
        }
    }
    assert!(checked > 200);
    assert!(agreed * 3 > checked, "{agreed} of {checked} points are mutually visible");
}

/// Scene-grid voxels whose cube overlaps `b` with positive volume.
fn touched_voxels(grid: &GridSpec, b: &Box3D) -> std::collections::BTreeSet<[usize; 3]> {
    let vs = grid.voxel_size();
    let reach = 0.5 * (b.dims[0].hypot(b.dims[2])) + vs.x;
    let lo = grid.world_to_mem(&(b.center - Vec3::new(reach, reach, reach)));
    let hi = grid.world_to_mem(&(b.center + Vec3::new(reach, reach, reach)));
    let mut out = std::collections::BTreeSet::new();
    let range = |a: usize| {
        let l = lo[a].floor().max(0.0) as usize;
        let h = (hi[a].ceil().max(0.0) as usize).min(grid.resolution[a] - 1);
        l..=h
    };
    for x in range(0) {
        for y in range(1) {
            for z in range(2) {
                let cube = Box3D::new(grid.voxel_center([x, y, z]), [vs.x, vs.y, vs.z], 0.0);
                if iou_3d(&cube, b) > 0.0 {
                    out.insert([x, y, z]);
                }
            }
        }
    }
    out
}

// spheres are tested exactly, their bounding cube reaches past the footprint disc
fn primitive_voxels(grid: &GridSpec, p: &Primitive) -> std::collections::BTreeSet<[usize; 3]> {
    let mut vs = touched_voxels(grid, &primitive_box(p));
    if let Shape::Sphere { radius } = p.shape {
        let half = grid.voxel_size() * 0.5;
        let c = p.pose.translation;
        vs.retain(|&v| {
            let d = grid.voxel_center(v) - c;
            let gap =
                Vec3::new((d.x.abs() - half.x).max(0.0), (d.y.abs() - half.y).max(0.0), (d.z.abs() - half.z).max(0.0));
            gap.norm() < radius
        });
    }
    vs
}

#[test]
fn movers_never_overlap_static_geometry() {
    let cfg = SimConfig::default();
    let grid = scene_grid();
    for seed in 0..200 {
        let scene = generate_scene(EpisodeKind::Dynamic, seed, &cfg).unwrap();
        let statics: Vec<Box3D> = scene.statics.iter().map(primitive_box).collect();
        let static_voxels: std::collections::BTreeSet<[usize; 3]> =
            scene.statics.iter().flat_map(|p| primitive_voxels(&grid, p)).collect();
        for f in 0..scene.frame_count {
            let movers: Vec<Box3D> = scene.movers.iter().map(|m| m.box_at(f)).collect();
            for (i, m) in movers.iter().enumerate() {
                for s in &statics {
                    assert_eq!(iou_3d(m, s), 0.0, "seed {seed} frame {f}: mover {i} intersects static geometry");
                }
                for o in &movers[i + 1..] {
                    assert_eq!(iou_3d(m, o), 0.0, "seed {seed} frame {f}: movers intersect");
                }
                let shared = touched_voxels(&grid, m).intersection(&static_voxels).count();
                assert_eq!(shared, 0, "seed {seed} frame {f}: mover {i} shares voxels with static geometry");
            }
        }
    }
}

#[test]
fn ground_plane_fills_one_voxel_layer() {
    let ref_scene = generate_scene(EpisodeKind::Static, 9, &small_sim()).unwrap();
    let scene = SceneSpec {
        ground: GroundSpec { albedo: [0.6; 3], texture_seed: 2, texture_scale: 1.0 },
        statics: vec![],
        movers: vec![],
        cameras: ref_scene.cameras.clone(),
        frame_count: ref_scene.frame_count,
        seed: 9,
        sun: ref_scene.sun,
    };
    let ep = render_episode(scene, &small_sim());
    let views: Vec<(usize, usize)> = (0..ep.camera_count()).map(|c| (0, c)).collect();
    let grid = ep.voxelize(&views, &scene_grid()).unwrap();
    let occupied: Vec<usize> = (0..grid.spec.num_voxels()).filter(|&v| grid.occupied(v)).collect();
    assert!(occupied.len() > 100);
    // the plane y = 0 passes through the centers of the lowest layer
    for v in occupied {
        assert!(grid.spec.unravel(v)[1] <= 1);
    }
}

#[test]
fn encoder_is_equivariant_to_stride_shifts() {
    let spec = EncoderSpec::desk();
    let params = EncoderParams::init(spec.clone(), 4).unwrap();
    let stride = spec.total_stride();
    let res = [32, 8, 8];
    let gspec = GridSpec::new(Vec3::zeros(), [32.0, 8.0, 8.0], res).unwrap();
    let c = spec.input_channels;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut a = VoxelGrid::zeros(gspec, c);
    for x in 0..res[0] - stride {
        for y in 0..res[1] {
            for z in 0..res[2] {
                if rand::Rng::gen_bool(&mut rng, 0.3) {
                    let v = a.voxel_mut([x, y, z]);
                    v[0] = 1.0;
                    for ch in 1..c {
                        v[ch] = rand::Rng::gen_range(&mut rng, 0.0..1.0);
                    }
                }
            }
        }
    }
    let mut b = VoxelGrid::zeros(gspec, c);
    for x in 0..res[0] - stride {
        for y in 0..res[1] {
            for z in 0..res[2] {
                b.voxel_mut([x + stride, y, z]).copy_from_slice(a.voxel([x, y, z]));
            }
        }
    }
    let ma = params.forward(&a).unwrap();
    let mb = params.forward(&b).unwrap();
    let border = 12;
    for x in border..res[0] - border - stride {
        for y in 0..res[1] {
            for z in 0..res[2] {
                let (fa, fb) = (ma.voxel([x, y, z]), mb.voxel([x + stride, y, z]));
                for (p, q) in fa.iter().zip(fb) {
                    assert!((p - q).abs() < 1e-4, "voxel ({x},{y},{z})");
                }
            }
        }
    }
}

#[test]
fn oracle_mask_keeps_pairs_off_movers() {
    let cfg = small_sim();
    let ep = generate_episode(EpisodeKind::Dynamic, 17, &cfg).unwrap();
    let views = |f: usize| (0..ep.camera_count()).map(|c| (f, c)).collect::<Vec<_>>();
    let frames = (0, 3);
    let center = ep.gt_boxes[0][0].center;
    let spec = make_search_region(&Vec3::new(center.x, 0.75, center.z), &SearchRegionConfig::default());
    let input_i = ep.voxelize(&views(frames.0), &spec).unwrap();
    let input_j = ep.voxelize(&views(frames.1), &spec).unwrap();
    let mask = oracle_static_mask(&ep, frames, &spec);
    let on_mover = |p: &Vec3| ep.gt_boxes.iter().any(|t| t[frames.0].contains(p) || t[frames.1].contains(p));
    // movers do occupy voxels of this crop
    let mover_voxels = (0..spec.num_voxels())
        .filter(|&v| input_i.occupied(v) && on_mover(&spec.voxel_center(spec.unravel(v))))
        .count();
    assert!(mover_voxels > 0);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let pairs =
        sample_static_correspondences(&input_i, &input_j, &input_i, &input_j, &mask, 100_000, &mut rng).unwrap();
    assert!(!pairs.is_empty());
    for p in &pairs {
        assert!(!on_mover(&spec.voxel_center(p.index_i)), "pair at {:?} lies on a mover", p.index_i);
    }
}

#[test]
fn unreachable_reliability_threshold_freezes_the_encoder() {
    let cfg = TrainConfig { stage3_iterations: 6, ..tiny_train() };
    let dyns = episodes(EpisodeKind::Dynamic, 0..2, &small_sim());
    let init = EncoderParams::init(cfg.encoder.clone(), 1).unwrap();
    let rel = ReliabilityParams::init(voxtrack::learn::ReliabilitySpec { channels: 8, hidden: 32 }, 2);
    let sel = StaticSelection::Reliability { params: &rel, threshold: 1.0 + 1e-9 };
    let out = train_stage3_finetune(&dyns, &[], &init, sel, &cfg).unwrap();
    assert_eq!(out.skipped, 6);
    assert!(out.metrics.is_empty());
    assert_eq!(out.encoder, init);
}

#[test]
fn stage3_without_dynamic_data_is_an_error() {
    let cfg = tiny_train();
    let statics = episodes(EpisodeKind::Static, 0..1, &small_sim());
    let init = EncoderParams::init(cfg.encoder.clone(), 1).unwrap();
    let err = train_stage3_finetune(&statics, &[], &init, StaticSelection::All, &cfg).unwrap_err();
    assert!(matches!(err, voxtrack::learn::LearnError::DataMissing(_)));
}

#[test]
fn stage1_is_seed_deterministic_and_descends() {
    let cfg = TrainConfig { stage1_iterations: 100, seed: 3, ..tiny_train() };
    let statics = episodes(EpisodeKind::Static, 0..4, &small_sim());
    let a = train_stage1(&statics, &[], None, &cfg).unwrap();
    let b = train_stage1(&statics, &[], None, &cfg).unwrap();
    assert_eq!(a.encoder, b.encoder);
    assert_eq!(a.metrics, b.metrics);
    let first = a.metrics.first().unwrap().loss;
    let last = a.metrics.last().unwrap().loss;
    assert!(last < first, "loss {first} -> {last}");
    let c = train_stage1(&statics, &[], None, &TrainConfig { seed: 4, ..cfg }).unwrap();
    assert_ne!(a.encoder, c.encoder);
}

#[test]
fn stage2_learns_without_touching_the_encoder() {
    let cfg = TrainConfig { stage1_iterations: 300, stage2_iterations: 200, ..tiny_train() };
    let statics = episodes(EpisodeKind::Static, 0..6, &small_sim());
    let enc = train_stage1(&statics, &[], None, &cfg).unwrap().encoder;
    let before = enc.clone();
    let (rel, rows) = train_stage2_reliability(&statics, &enc, &cfg).unwrap();
    assert_eq!(enc, before);
    let head: f64 = rows[..20].iter().map(|r| r.loss).sum::<f64>() / 20.0;
    let tail: f64 = rows[rows.len() - 20..].iter().map(|r| r.loss).sum::<f64>() / 20.0;
    assert!(tail < head, "loss {head} -> {tail}");
    let held = episodes(EpisodeKind::Static, 100..103, &small_sim());
    let acc = reliability_accuracy(&rel, &enc, &held, &cfg, 10, 5).unwrap();
    assert!(acc > 0.9, "held-out accuracy {acc}");
}

#[test]
fn tracked_boxes_keep_their_size() {
    let ep = generate_episode(EpisodeKind::Dynamic, 23, &small_sim()).unwrap();
    let enc = EncoderParams::init(EncoderSpec::tiny(), 0).unwrap();
    let state = track_sequence(&ep, &ep.gt_boxes[0][0], &enc, &TrackerConfig::default()).unwrap();
    assert_eq!(state.boxes.len(), ep.frame_count());
    for b in &state.boxes {
        assert_eq!(b.dims, ep.gt_boxes[0][0].dims);
    }
}
