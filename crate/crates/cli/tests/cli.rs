use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use voxtrack::sim::read_episode;
use voxtrack::track::{TrajectoryFile, TrajectoryRecord, TRAJECTORY_FORMAT};

fn voxtrack(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_voxtrack"))
        .args(args)
        .env("VOXTRACK_LOG", "error")
        .env_remove("VOXTRACK_CONFIG")
        .env_remove("VOXTRACK_THREADS")
        .output()
        .expect("launching voxtrack")
}

fn ok(args: &[&str]) -> Output {
    let out = voxtrack(args);
    assert!(out.status.success(), "voxtrack {args:?}: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn s(p: &Path) -> String {
    p.to_string_lossy().into_owned()
}

/// Small images keep generation fast.
fn small_config(dir: &Path) -> String {
    let path = dir.join("run.json");
    std::fs::write(&path, br#"{"sim": {"image_width": 24, "image_height": 24}}"#).unwrap();
    s(&path)
}

fn gen(dir: &Path, name: &str, n_static: usize, n_dynamic: usize, seed: u64) -> PathBuf {
    let out = dir.join(name);
    let cfg = small_config(dir);
    ok(&[
        "--config",
        &cfg,
        "gen",
        "--static",
        &n_static.to_string(),
        "--dynamic",
        &n_dynamic.to_string(),
        "--seed",
        &seed.to_string(),
        "--out",
        &s(&out),
    ]);
    out
}

fn tree(root: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in std::fs::read_dir(dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(root).unwrap().to_path_buf(), std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn help_lists_subcommands() {
    let out = ok(&["--help"]);
    let text = String::from_utf8_lossy(&out.stdout);
    for cmd in ["gen", "train", "track", "eval", "viz", "--threads", "--config"] {
        assert!(text.contains(cmd), "help lacks {cmd}");
    }
}

#[test]
fn usage_errors_exit_with_two() {
    assert_eq!(voxtrack(&["gen", "--bogus"]).status.code(), Some(2));
    assert_eq!(voxtrack(&["track", "--checkpoint", "x.ckpt", "--episode", "e"]).status.code(), Some(2));
}

#[test]
fn missing_inputs_exit_with_three() {
    let dir = tempfile::tempdir().unwrap();
    let missing = s(&dir.path().join("nowhere"));
    let out = voxtrack(&["train", "--data", &missing, "--out", &s(&dir.path().join("ck")), "--stages", "1"]);
    assert_eq!(out.status.code(), Some(3));
    let bad = dir.path().join("bad.ckpt");
    std::fs::write(&bad, b"not a checkpoint").unwrap();
    let out =
        voxtrack(&["track", "--checkpoint", &s(&bad), "--episode", &missing, "--init-from-gt", "--out", &missing]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn empty_generation_writes_an_empty_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen(dir.path(), "data", 0, 0, 1);
    let m: serde_json::Value = serde_json::from_slice(&std::fs::read(data.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(m["entries"].as_array().map(Vec::len), Some(0));
    assert_eq!(std::fs::read_dir(&data).unwrap().count(), 1);
}

#[test]
fn generation_is_reproducible_and_seed_dependent() {
    let dir = tempfile::tempdir().unwrap();
    let a = tree(&gen(dir.path(), "a", 1, 1, 5));
    let b = tree(&gen(dir.path(), "b", 1, 1, 5));
    let c = tree(&gen(dir.path(), "c", 1, 1, 6));
    assert_eq!(a, b);
    assert_ne!(a, c);
    assert!(a.iter().any(|(p, _)| p.starts_with("static_0000")));
    assert!(a.iter().any(|(p, _)| p.starts_with("dynamic_0000")));
}

#[test]
fn ground_truth_trajectories_score_perfectly() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen(dir.path(), "data", 0, 2, 3);
    let traj = dir.path().join("traj");
    std::fs::create_dir(&traj).unwrap();
    for name in ["dynamic_0000", "dynamic_0001"] {
        let ep = read_episode(&data.join(name)).unwrap();
        let file = TrajectoryFile {
            format: TRAJECTORY_FORMAT.into(),
            seed: 0,
            config_hash: "0".into(),
            episode: name.into(),
            object: 0,
            records: ep.gt_boxes[0]
                .iter()
                .enumerate()
                .map(|(frame, b)| TrajectoryRecord {
                    frame,
                    center: [b.center.x, b.center.y, b.center.z],
                    dims: b.dims,
                    yaw: b.yaw,
                    inliers: 0,
                    lost: false,
                })
                .collect(),
        };
        std::fs::write(traj.join(format!("{name}_obj0.json")), serde_json::to_vec(&file).unwrap()).unwrap();
    }
    let table = dir.path().join("table.csv");
    ok(&["eval", "--data", &s(&data), "--trajectories", &s(&traj), "--out", &s(&table)]);
    let text = std::fs::read_to_string(&table).unwrap();
    let row = text.lines().find(|l| l.starts_with("tracker,all,")).expect("tracker row");
    let cells: Vec<&str> = row.split(',').collect();
    assert_eq!(cells[2], "2");
    // every IOU column is one, the lost fraction zero
    for c in &cells[3..cells.len() - 1] {
        assert!((c.parse::<f64>().unwrap() - 1.0).abs() < 1e-9, "{row}");
    }
    assert_eq!(cells.last().unwrap().parse::<f64>().unwrap(), 0.0);
}

#[test]
fn track_and_viz_cover_every_frame() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen(dir.path(), "data", 1, 1, 9);
    let cfg = small_config(dir.path());
    let ck = dir.path().join("ck");
    ok(&["--config", &cfg, "train", "--data", &s(&data), "--out", &s(&ck), "--stages", "1", "--iters", "2"]);
    let stage1 = s(&ck.join("stage1.ckpt"));
    let episode = data.join("dynamic_0000");
    let frames = read_episode(&episode).unwrap().scene.frame_count;

    let traj = dir.path().join("traj");
    ok(&[
        "--config",
        &cfg,
        "track",
        "--checkpoint",
        &stage1,
        "--episode",
        &s(&episode),
        "--init-from-gt",
        "--object",
        "0",
        "--out",
        &s(&traj),
    ]);
    let file = TrajectoryFile::parse(&std::fs::read(traj.join("dynamic_0000_obj0.json")).unwrap()).unwrap();
    assert_eq!(file.records.len(), frames);
    let csv = std::fs::read_to_string(traj.join("dynamic_0000_obj0.csv")).unwrap();
    assert_eq!(csv.lines().filter(|l| l.chars().next().is_some_and(|c| c.is_ascii_digit())).count(), frames);

    let viz = dir.path().join("viz");
    ok(&["--config", &cfg, "viz", "--checkpoint", &stage1, "--episode", &s(&episode), "--out", &s(&viz)]);
    let names: Vec<String> =
        std::fs::read_dir(&viz).unwrap().map(|e| e.unwrap().file_name().to_string_lossy().into_owned()).collect();
    assert_eq!(names.len(), 2 * frames);
    for f in 0..frames {
        assert!(names.contains(&format!("occupancy_f{f:02}.ppm")));
        let ppm = std::fs::read(viz.join(format!("pca_f{f:02}.ppm"))).unwrap();
        assert!(ppm.starts_with(b"P6\n"));
    }
}
