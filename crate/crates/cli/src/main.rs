use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use thiserror::Error;
use voxtrack::eval::{
    birdseye_occupancy_image, birdseye_pca_image, evaluate_trajectories, run_benchmark, standard_methods, write_ppm,
    BenchmarkConfig, BenchmarkReport, MethodTrajectories,
};
use voxtrack::geom::GeomError;
use voxtrack::learn::{
    train_stage1, train_stage2_reliability, train_stage3_finetune, write_metrics_csv, LearnError, MetricRow,
    ReliabilityParams, StaticSelection, TrainConfig,
};
use voxtrack::net::{read_checkpoint, write_checkpoint, EncoderParams};
use voxtrack::sim::{generate_episode, read_episode, write_episode, Episode, EpisodeKind, SimConfig};
use voxtrack::track::{
    track_objects, trajectory_records, write_trajectory_csv, Box3D, TrackError, TrackerConfig, TrajectoryFile,
    TRAJECTORY_FORMAT,
};

const MANIFEST_FILE: &str = "manifest.json";
const MANIFEST_FORMAT: &str = "manifest1";

/// Every numeric default of a run. Missing fields keep their defaults;
/// unknown fields are rejected.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct RunConfig {
    sim: SimConfig,
    train: TrainConfig,
    tracker: TrackerConfig,
    benchmark: BenchmarkConfig,
}

impl RunConfig {
    fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(RunConfig::default());
        };
        let bytes = std::fs::read(path).with_context(|| format!("reading config {}", path.display()))?;
        serde_json::from_slice(&bytes).map_err(|e| CliError::Data(format!("config {}: {e}", path.display())).into())
    }

    /// First 16 hex digits of the SHA-256 of the canonical JSON encoding.
    fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        let digest = Sha256::digest(&json);
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }
}

#[derive(Debug, Error)]
enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Data(String),
}

#[derive(Debug, Parser)]
#[command(
    name = "voxtrack",
    version,
    about = "Synthetic data, training, tracking and evaluation for voxel feature trackers"
)]
struct Cli {
    /// JSON run config (sections `sim`, `train`, `tracker`, `benchmark`).
    #[arg(long, global = true, env = "VOXTRACK_CONFIG")]
    config: Option<PathBuf>,
    /// Worker threads; 1 gives bit-identical outputs across runs.
    #[arg(long, global = true, env = "VOXTRACK_THREADS")]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic dataset of static and dynamic episodes.
    Gen(GenArgs),
    /// Run training stages and write one checkpoint per stage.
    Train(TrainArgs),
    /// Track objects through one episode.
    Track(TrackArgs),
    /// Score trajectory files, or run the full benchmark from checkpoints.
    Eval(EvalArgs),
    /// Write bird's-eye occupancy and PCA feature images per frame.
    Viz(VizArgs),
}

#[derive(Debug, Args)]
struct GenArgs {
    /// Number of static episodes.
    #[arg(long = "static", default_value_t = 0, env = "VOXTRACK_STATIC")]
    n_static: usize,
    /// Number of dynamic episodes.
    #[arg(long = "dynamic", default_value_t = 0, env = "VOXTRACK_DYNAMIC")]
    n_dynamic: usize,
    #[arg(long, default_value_t = 0, env = "VOXTRACK_SEED")]
    seed: u64,
    /// Output dataset directory.
    #[arg(long, env = "VOXTRACK_OUT")]
    out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Selection {
    /// Reliability network from stage 2 or `--reliability`.
    Reliability,
    /// Keep every voxel.
    All,
    /// Remove ground-truth movers.
    Oracle,
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// Dataset directory holding a manifest.
    #[arg(long, env = "VOXTRACK_DATA")]
    data: PathBuf,
    /// Output directory for checkpoints and metrics.
    #[arg(long, env = "VOXTRACK_OUT")]
    out: PathBuf,
    /// Stages to run, comma separated.
    #[arg(long, value_delimiter = ',', default_value = "1,2,3", value_parser = clap::value_parser!(u8).range(1..=3))]
    stages: Vec<u8>,
    /// Iterations for every selected stage, overriding the config.
    #[arg(long, env = "VOXTRACK_ITERS")]
    iters: Option<usize>,
    /// Training seed, overriding the config.
    #[arg(long, env = "VOXTRACK_SEED")]
    seed: Option<u64>,
    /// Encoder checkpoint used when stage 1 is not run (or as its start).
    #[arg(long)]
    init: Option<PathBuf>,
    /// Reliability checkpoint used by stage 3 when stage 2 is not run.
    #[arg(long)]
    reliability: Option<PathBuf>,
    /// Static-point selection for stage 3.
    #[arg(long, value_enum, default_value_t = Selection::Reliability)]
    static_selection: Selection,
}

#[derive(Debug, Args)]
#[command(group = clap::ArgGroup::new("init").required(true).args(["init_from_gt", "box_file"]))]
struct TrackArgs {
    /// Encoder checkpoint.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Episode directory.
    #[arg(long)]
    episode: PathBuf,
    /// Start from the ground-truth frame-0 boxes.
    #[arg(long)]
    init_from_gt: bool,
    /// JSON file with the frame-0 box (`center`, `dims`, `yaw`).
    #[arg(long = "box")]
    box_file: Option<PathBuf>,
    /// Ground-truth object to track; all objects when absent.
    #[arg(long, requires = "init_from_gt")]
    object: Option<usize>,
    /// Tracker RANSAC seed, overriding the config.
    #[arg(long, env = "VOXTRACK_SEED")]
    seed: Option<u64>,
    /// Output directory for trajectory files.
    #[arg(long, env = "VOXTRACK_OUT")]
    out: PathBuf,
}

#[derive(Debug, Args)]
#[command(group = clap::ArgGroup::new("source").required(true).args(["trajectories", "checkpoint"]))]
struct EvalArgs {
    /// Dataset directory holding a manifest.
    #[arg(long, env = "VOXTRACK_DATA")]
    data: PathBuf,
    /// Directory of trajectory JSON files to score.
    #[arg(long)]
    trajectories: Option<PathBuf>,
    /// Trained encoder; runs the benchmark on the dynamic episodes.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Encoder finetuned without static-point selection, for the ablation row.
    #[arg(long, requires = "checkpoint")]
    no_selection_checkpoint: Option<PathBuf>,
    /// Seed of the random-feature baseline, overriding the config.
    #[arg(long, env = "VOXTRACK_SEED")]
    seed: Option<u64>,
    /// Output CSV with one row per method and split.
    #[arg(long, env = "VOXTRACK_OUT")]
    out: PathBuf,
    /// Optional CSV with the full IOU curves.
    #[arg(long)]
    curves: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct VizArgs {
    /// Encoder checkpoint.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Episode directory.
    #[arg(long)]
    episode: PathBuf,
    /// Output directory for PPM images.
    #[arg(long, env = "VOXTRACK_OUT")]
    out: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestEntry {
    name: String,
    is_static: bool,
    seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format: String,
    seed: u64,
    config_hash: String,
    entries: Vec<ManifestEntry>,
}

/// Seeds live in disjoint halves of the lower 32 bits so static and
/// dynamic episodes of one dataset never share a scene.
fn episode_seed(seed: u64, is_static: bool, index: usize) -> u64 {
    let half = if is_static { 0 } else { 1u64 << 31 };
    (seed << 32) ^ half ^ index as u64
}

fn io_context(path: &Path) -> String {
    format!("writing {}", path.display())
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).with_context(|| format!("creating {}", path.display()))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).with_context(|| io_context(path))
}

fn preamble(seed: u64, hash: &str) -> Vec<String> {
    vec![format!("seed={seed}"), format!("config_hash={hash}")]
}

fn meta(seed: u64, hash: &str, extra: &[(&str, String)]) -> BTreeMap<String, String> {
    let mut m = BTreeMap::new();
    m.insert("seed".into(), seed.to_string());
    m.insert("config_hash".into(), hash.to_string());
    for (k, v) in extra {
        m.insert((*k).into(), v.clone());
    }
    m
}

fn load_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST_FILE);
    let bytes =
        std::fs::read(&path).map_err(|e| CliError::Data(format!("no dataset manifest at {}: {e}", path.display())))?;
    let m: Manifest = serde_json::from_slice(&bytes)
        .map_err(|e| CliError::Data(format!("malformed manifest {}: {e}", path.display())))?;
    if m.format != MANIFEST_FORMAT {
        bail!(CliError::Data(format!("unknown manifest format {:?}", m.format)));
    }
    Ok(m)
}

fn load_episodes(dir: &Path, entries: &[ManifestEntry]) -> Result<Vec<Episode>> {
    entries
        .par_iter()
        .map(|e| read_episode(&dir.join(&e.name)).with_context(|| format!("loading episode {}", e.name)))
        .collect()
}

fn load_encoder(path: &Path) -> Result<EncoderParams> {
    let ckpt = read_checkpoint(path).with_context(|| format!("reading checkpoint {}", path.display()))?;
    EncoderParams::from_checkpoint(ckpt).with_context(|| format!("loading encoder from {}", path.display()))
}

fn load_reliability(path: &Path) -> Result<ReliabilityParams> {
    let ckpt = read_checkpoint(path).with_context(|| format!("reading checkpoint {}", path.display()))?;
    ReliabilityParams::from_checkpoint(ckpt).with_context(|| format!("loading reliability net from {}", path.display()))
}

fn episode_name(dir: &Path) -> String {
    dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_else(|| "episode".into())
}

fn cmd_gen(args: &GenArgs, cfg: &RunConfig, hash: &str) -> Result<()> {
    create_dir(&args.out)?;
    let mut entries = Vec::with_capacity(args.n_static + args.n_dynamic);
    for i in 0..args.n_static {
        entries.push(ManifestEntry {
            name: format!("static_{i:04}"),
            is_static: true,
            seed: episode_seed(args.seed, true, i),
        });
    }
    for i in 0..args.n_dynamic {
        entries.push(ManifestEntry {
            name: format!("dynamic_{i:04}"),
            is_static: false,
            seed: episode_seed(args.seed, false, i),
        });
    }
    entries.par_iter().try_for_each(|e| -> Result<()> {
        let kind = if e.is_static { EpisodeKind::Static } else { EpisodeKind::Dynamic };
        let ep = generate_episode(kind, e.seed, &cfg.sim).with_context(|| format!("generating {}", e.name))?;
        write_episode(&args.out.join(&e.name), &ep)?;
        Ok(())
    })?;
    let manifest = Manifest { format: MANIFEST_FORMAT.into(), seed: args.seed, config_hash: hash.into(), entries };
    let path = args.out.join(MANIFEST_FILE);
    write_file(&path, &serde_json::to_vec_pretty(&manifest)?)?;
    log::info!("wrote {} episodes to {}", manifest.entries.len(), args.out.display());
    Ok(())
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn cmd_train(args: &TrainArgs, cfg: &RunConfig, hash: &str) -> Result<()> {
    let mut tcfg = cfg.train.clone();
    if let Some(s) = args.seed {
        tcfg.seed = s;
    }
    if let Some(n) = args.iters {
        tcfg.stage1_iterations = n;
        tcfg.stage2_iterations = n;
        tcfg.stage3_iterations = n;
    }
    tcfg.validate()?;
    let run = |s: u8| args.stages.contains(&s);
    let manifest = load_manifest(&args.data)?;
    let has_static = manifest.entries.iter().any(|e| e.is_static);
    let has_dynamic = manifest.entries.iter().any(|e| !e.is_static);
    if (run(1) || run(2)) && !has_static {
        let stage = if run(1) { 1 } else { 2 };
        bail!(LearnError::DataMissing(format!("stage {stage} (static episodes)")));
    }
    if run(3) && !has_dynamic {
        bail!(LearnError::DataMissing("stage 3 (dynamic episodes)".into()));
    }
    if !run(1) && (run(2) || run(3)) && args.init.is_none() {
        bail!(CliError::Usage("stages 2 and 3 need an encoder: include stage 1 or pass --init".into()));
    }
    if run(3) && !run(2) && args.static_selection == Selection::Reliability && args.reliability.is_none() {
        bail!(CliError::Usage("stage 3 with reliability selection needs stage 2 or --reliability".into()));
    }
    let wanted: Vec<ManifestEntry> =
        manifest.entries.iter().filter(|e| if e.is_static { run(1) || run(2) } else { run(3) }).cloned().collect();
    let episodes = load_episodes(&args.data, &wanted)?;
    create_dir(&args.out)?;

    let mut encoder = args.init.as_deref().map(load_encoder).transpose()?;
    if let Some(e) = &encoder {
        tcfg.encoder = e.spec.clone();
    }
    let mut metrics: Vec<MetricRow> = Vec::new();
    if run(1) {
        let out = train_stage1(&episodes, &[], encoder.take(), &tcfg).context("stage 1")?;
        log::info!("stage 1: {} iterations, {} skipped", tcfg.stage1_iterations, out.skipped);
        metrics.extend(out.metrics);
        let path = args.out.join("stage1.ckpt");
        let ckpt =
            out.encoder.to_checkpoint(tcfg.stage1_iterations as u64, meta(tcfg.seed, hash, &[("stage", "1".into())]));
        write_checkpoint(&path, &ckpt).with_context(|| io_context(&path))?;
        encoder = Some(out.encoder);
    }
    let encoder = encoder.expect("an encoder is loaded or trained before stages 2 and 3");
    let mut reliability = args.reliability.as_deref().map(load_reliability).transpose()?;
    if run(2) {
        let before = sha256_hex(&encoder.to_checkpoint(0, BTreeMap::new()).to_bytes());
        let (params, rows) = train_stage2_reliability(&episodes, &encoder, &tcfg).context("stage 2")?;
        metrics.extend(rows);
        let path = args.out.join("stage2.ckpt");
        let extra = [("stage", "2".to_string()), ("encoder_sha256", before)];
        let ckpt = params.to_checkpoint(tcfg.stage2_iterations as u64, meta(tcfg.seed, hash, &extra));
        write_checkpoint(&path, &ckpt).with_context(|| io_context(&path))?;
        reliability = Some(params);
    }
    if run(3) {
        let selection = match args.static_selection {
            Selection::All => StaticSelection::All,
            Selection::Oracle => StaticSelection::Oracle,
            Selection::Reliability => StaticSelection::Reliability {
                params: reliability.as_ref().expect("reliability net checked above"),
                threshold: tcfg.reliability_threshold,
            },
        };
        let out = train_stage3_finetune(&episodes, &[], &encoder, selection, &tcfg).context("stage 3")?;
        log::info!("stage 3: {} iterations, {} skipped", tcfg.stage3_iterations, out.skipped);
        metrics.extend(out.metrics);
        let path = args.out.join("stage3.ckpt");
        let extra =
            [("stage", "3".to_string()), ("static_selection", format!("{:?}", args.static_selection).to_lowercase())];
        let ckpt = out.encoder.to_checkpoint(tcfg.stage3_iterations as u64, meta(tcfg.seed, hash, &extra));
        write_checkpoint(&path, &ckpt).with_context(|| io_context(&path))?;
    }
    let path = args.out.join("metrics.csv");
    let mut buf = Vec::new();
    write_metrics_csv(&mut buf, &preamble(tcfg.seed, hash), &metrics)?;
    write_file(&path, &buf)
}

fn cmd_track(args: &TrackArgs, cfg: &RunConfig, hash: &str) -> Result<()> {
    let mut tracker = cfg.tracker.clone();
    if let Some(s) = args.seed {
        tracker.seed = s;
    }
    let encoder = load_encoder(&args.checkpoint)?;
    let ep = read_episode(&args.episode).with_context(|| format!("loading episode {}", args.episode.display()))?;
    let name = episode_name(&args.episode);
    let (ids, boxes0): (Vec<usize>, Vec<Box3D>) = if let Some(path) = &args.box_file {
        let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
        let b: Box3D = serde_json::from_slice(&bytes)
            .map_err(|e| CliError::Data(format!("malformed box {}: {e}", path.display())))?;
        if !b.is_valid() {
            bail!(CliError::Data(format!("box in {} has non-positive or non-finite values", path.display())));
        }
        (vec![0], vec![b])
    } else {
        let ids: Vec<usize> = match args.object {
            Some(k) if k < ep.gt_boxes.len() => vec![k],
            Some(k) => {
                bail!(CliError::Data(format!("episode {name} has {} objects, no object {k}", ep.gt_boxes.len())))
            }
            None => (0..ep.gt_boxes.len()).collect(),
        };
        let boxes = ids.iter().map(|&k| ep.gt_boxes[k][0]).collect();
        (ids, boxes)
    };
    create_dir(&args.out)?;
    let states = track_objects(&ep, &boxes0, &encoder, &tracker).with_context(|| format!("tracking in {name}"))?;
    for (k, state) in ids.iter().zip(&states) {
        let records = trajectory_records(state);
        if records.iter().any(|r| r.lost) {
            log::warn!("{name} object {k}: track lost");
        }
        let file = TrajectoryFile {
            format: TRAJECTORY_FORMAT.into(),
            seed: tracker.seed,
            config_hash: hash.into(),
            episode: name.clone(),
            object: *k,
            records,
        };
        let stem = args.out.join(format!("{name}_obj{k}"));
        write_file(&stem.with_extension("json"), &serde_json::to_vec_pretty(&file)?)?;
        let mut csv = Vec::new();
        for line in preamble(tracker.seed, hash) {
            csv.extend_from_slice(format!("# {line}\n").as_bytes());
        }
        write_trajectory_csv(&mut csv, &file.records)?;
        write_file(&stem.with_extension("csv"), &csv)?;
    }
    Ok(())
}

fn load_trajectories(dir: &Path) -> Result<Vec<TrajectoryFile>> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .with_context(|| format!("listing {}", dir.display()))?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()
        .with_context(|| format!("listing {}", dir.display()))?;
    paths.retain(|p| p.extension().is_some_and(|x| x == "json"));
    paths.sort();
    if paths.is_empty() {
        bail!(CliError::Data(format!("no trajectory files in {}", dir.display())));
    }
    paths
        .iter()
        .map(|p| {
            let bytes = std::fs::read(p).with_context(|| format!("reading {}", p.display()))?;
            TrajectoryFile::parse(&bytes).with_context(|| format!("parsing {}", p.display()))
        })
        .collect()
}

fn score_trajectories(dir: &Path, trajectories: &Path, cfg: &BenchmarkConfig) -> Result<BenchmarkReport> {
    let manifest = load_manifest(dir)?;
    let files = load_trajectories(trajectories)?;
    let mut names: Vec<&str> = files.iter().map(|f| f.episode.as_str()).collect();
    names.sort_unstable();
    names.dedup();
    let entries: Vec<ManifestEntry> = names
        .iter()
        .map(|n| {
            manifest
                .entries
                .iter()
                .find(|e| e.name == *n)
                .cloned()
                .ok_or_else(|| CliError::Data(format!("episode {n} is not in the dataset")))
        })
        .collect::<Result<_, _>>()?;
    let episodes = load_episodes(dir, &entries)?;
    let mut gts = Vec::with_capacity(files.len());
    for f in &files {
        let ep = &episodes[names.binary_search(&f.episode.as_str()).expect("name collected above")];
        let gt = ep
            .gt_boxes
            .get(f.object)
            .ok_or_else(|| CliError::Data(format!("episode {} has no object {}", f.episode, f.object)))?;
        gts.push(gt.clone());
    }
    let tracked = MethodTrajectories {
        name: "tracker".into(),
        trajectories: files.iter().map(|f| f.boxes()).collect(),
        lost: files.iter().map(|f| f.records.iter().any(|r| r.lost)).collect(),
    };
    let zero = MethodTrajectories {
        name: "zero_motion".into(),
        trajectories: gts.iter().map(|g| vec![g[0]; g.len()]).collect(),
        lost: vec![false; gts.len()],
    };
    Ok(evaluate_trajectories(&[tracked, zero], &gts, cfg)?)
}

fn benchmark(args: &EvalArgs, checkpoint: &Path, cfg: &RunConfig, seed: u64) -> Result<BenchmarkReport> {
    let manifest = load_manifest(&args.data)?;
    let dynamic: Vec<ManifestEntry> = manifest.entries.iter().filter(|e| !e.is_static).cloned().collect();
    if dynamic.is_empty() {
        bail!(LearnError::DataMissing("the benchmark (dynamic episodes)".into()));
    }
    let episodes = load_episodes(&args.data, &dynamic)?;
    let trained = load_encoder(checkpoint)?;
    let random = EncoderParams::init(trained.spec.clone(), seed)?;
    let ablation = args.no_selection_checkpoint.as_deref().map(load_encoder).transpose()?;
    let methods = standard_methods(&trained, &random, ablation.as_ref(), &cfg.tracker);
    Ok(run_benchmark(&methods, &episodes, &cfg.benchmark)?)
}

fn cmd_eval(args: &EvalArgs, cfg: &RunConfig, hash: &str) -> Result<()> {
    let seed = args.seed.unwrap_or(cfg.tracker.seed);
    let report = match (&args.trajectories, &args.checkpoint) {
        (Some(t), _) => score_trajectories(&args.data, t, &cfg.benchmark)?,
        (None, Some(c)) => benchmark(args, c, cfg, seed)?,
        (None, None) => unreachable!("clap requires one source"),
    };
    let pre = preamble(seed, hash);
    let mut buf = Vec::new();
    report.write_table_csv(&mut buf, &cfg.benchmark.report_frames, &pre)?;
    if let Some(parent) = args.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    write_file(&args.out, &buf)?;
    print!("{}", String::from_utf8_lossy(&buf));
    if let Some(path) = &args.curves {
        let mut buf = Vec::new();
        report.write_csv(&mut buf, &pre)?;
        write_file(path, &buf)?;
    }
    Ok(())
}

fn cmd_viz(args: &VizArgs, cfg: &RunConfig, hash: &str) -> Result<()> {
    let encoder = load_encoder(&args.checkpoint)?;
    let ep = read_episode(&args.episode).with_context(|| format!("loading episode {}", args.episode.display()))?;
    create_dir(&args.out)?;
    let grid = &cfg.tracker.global_grid;
    let comments = vec![
        format!("episode={}", episode_name(&args.episode)),
        format!("seed={}", ep.scene.seed),
        format!("config_hash={hash}"),
    ];
    (0..ep.frame_count()).into_par_iter().try_for_each(|f| -> Result<()> {
        let views: Vec<(usize, usize)> = (0..ep.camera_count()).map(|c| (f, c)).collect();
        let input = ep.voxelize(&views, grid)?;
        let map = encoder.forward(&input)?;
        let pca = birdseye_pca_image(&map)?;
        if pca.degenerate {
            log::warn!("frame {f}: features span fewer than 3 dimensions, showing raw channels");
        }
        let mut buf = Vec::new();
        write_ppm(&mut buf, &birdseye_occupancy_image(&input), &comments)?;
        write_file(&args.out.join(format!("occupancy_f{f:02}.ppm")), &buf)?;
        let mut buf = Vec::new();
        write_ppm(&mut buf, &pca.image, &comments)?;
        write_file(&args.out.join(format!("pca_f{f:02}.ppm")), &buf)
    })
}

/// 4 for numeric failures, 2 for usage errors, 3 for everything else.
fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(CliError::Usage(_)) = cause.downcast_ref::<CliError>() {
            return 2;
        }
        if let Some(LearnError::NonFinite(_)) = cause.downcast_ref::<LearnError>() {
            return 4;
        }
        if cause.downcast_ref::<GeomError>().is_some() {
            return 4;
        }
        if let Some(TrackError::TooFewCorrespondences(_)) = cause.downcast_ref::<TrackError>() {
            return 4;
        }
    }
    3
}

fn run(cli: &Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            bail!(CliError::Usage("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    let cfg = RunConfig::load(cli.config.as_deref())?;
    let hash = cfg.hash();
    log::debug!("config hash {hash}");
    match &cli.command {
        Command::Gen(a) => cmd_gen(a, &cfg, &hash),
        Command::Train(a) => cmd_train(a, &cfg, &hash),
        Command::Track(a) => cmd_track(a, &cfg, &hash),
        Command::Eval(a) => cmd_eval(a, &cfg, &hash),
        Command::Viz(a) => cmd_viz(a, &cfg, &hash),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("VOXTRACK_LOG", "info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
