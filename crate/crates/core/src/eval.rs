//! Tracking metrics, the benchmark harness and bird's-eye visualizations.

use crate::grid::VoxelGrid;
use crate::net::EncoderParams;
use crate::sim::Episode;
use crate::track::{track_objects, Box3D, TrackError, TrackerConfig};
use nalgebra::{DMatrix, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::Write;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("length mismatch: {0}")]
    LengthMismatch(String),
    #[error("feature map needs at least 3 channels, has {0}")]
    TooFewChannels(usize),
    #[error("no sequences to evaluate")]
    Empty,
    #[error(transparent)]
    Track(#[from] TrackError),
}

type Polygon = Vec<[f64; 2]>;

fn signed_area(p: &[[f64; 2]]) -> f64 {
    let n = p.len();
    (0..n)
        .map(|i| {
            let (a, b) = (p[i], p[(i + 1) % n]);
            a[0] * b[1] - b[0] * a[1]
        })
        .sum::<f64>()
        / 2.0
}

fn counter_clockwise(mut p: Polygon) -> Polygon {
    if signed_area(&p) < 0.0 {
        p.reverse();
    }
    p
}

fn cross(o: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])
}

/// Sutherland-Hodgman clip of `subject` by the convex counter-clockwise
/// polygon `clip`.
fn clip_polygon(subject: &[[f64; 2]], clip: &[[f64; 2]]) -> Polygon {
    let mut out: Polygon = subject.to_vec();
    for i in 0..clip.len() {
        if out.is_empty() {
            break;
        }
        let (a, b) = (clip[i], clip[(i + 1) % clip.len()]);
        let input = std::mem::take(&mut out);
        for k in 0..input.len() {
            let p = input[k];
            let q = input[(k + 1) % input.len()];
            let (dp, dq) = (cross(a, b, p), cross(a, b, q));
            if dp >= 0.0 {
                out.push(p);
            }
            if (dp >= 0.0) != (dq >= 0.0) {
                let t = dp / (dp - dq);
                out.push([p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1])]);
            }
        }
    }
    out
}

/// Intersection-over-union of two yawed boxes: footprint polygon overlap
/// times vertical overlap.
pub fn iou_3d(a: &Box3D, b: &Box3D) -> f64 {
    let (a0, a1) = a.y_range();
    let (b0, b1) = b.y_range();
    let h = a1.min(b1) - a0.max(b0);
    if h <= 0.0 {
        return 0.0;
    }
    let pa = counter_clockwise(a.footprint().to_vec());
    let pb = counter_clockwise(b.footprint().to_vec());
    let clipped = clip_polygon(&pa, &pb);
    let area = if clipped.len() < 3 { 0.0 } else { signed_area(&clipped).abs() };
    let inter = area * h;
    let union = a.volume() + b.volume() - inter;
    if union <= 0.0 {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}

/// Mean IOU per frame index over a set of sequences.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IouCurve {
    pub frames: Vec<usize>,
    pub values: Vec<f64>,
    pub sequences: usize,
}

impl IouCurve {
    pub fn at(&self, frame: usize) -> Option<f64> {
        self.values.get(frame).copied()
    }
}

pub fn iou_curve(trajectories: &[Vec<Box3D>], ground_truths: &[Vec<Box3D>]) -> Result<IouCurve, EvalError> {
    if trajectories.len() != ground_truths.len() {
        return Err(EvalError::LengthMismatch(format!(
            "{} trajectories for {} ground truths",
            trajectories.len(),
            ground_truths.len()
        )));
    }
    let Some(first) = ground_truths.first() else {
        return Err(EvalError::Empty);
    };
    let len = first.len();
    let mut sums = vec![0.0; len];
    for (k, (t, g)) in trajectories.iter().zip(ground_truths).enumerate() {
        if t.len() != len || g.len() != len {
            return Err(EvalError::LengthMismatch(format!(
                "sequence {k} has length {} / {}, expected {len}",
                t.len(),
                g.len()
            )));
        }
        for (f, (bt, bg)) in t.iter().zip(g).enumerate() {
            sums[f] += iou_3d(bt, bg);
        }
    }
    let n = trajectories.len() as f64;
    Ok(IouCurve {
        frames: (0..len).collect(),
        values: sums.iter().map(|s| s / n).collect(),
        sequences: trajectories.len(),
    })
}

/// Row-major RGB image with channel values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl RgbImage {
    pub fn pixel(&self, col: usize, row: usize) -> [f64; 3] {
        let i = (row * self.width + col) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }
}

/// Binary PPM (`P6`), 8 bits per channel, with optional `#` comment lines
/// in the header.
pub fn write_ppm<W: Write>(mut w: W, img: &RgbImage, comments: &[String]) -> std::io::Result<()> {
    writeln!(w, "P6")?;
    for c in comments {
        writeln!(w, "# {}", c.replace('\n', " "))?;
    }
    write!(w, "{} {}\n255\n", img.width, img.height)?;
    let bytes: Vec<u8> = img.data.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    w.write_all(&bytes)
}

/// Bird's-eye projection of a feature map: cell features averaged over
/// the vertical axis, compressed to 3 principal components and min-max
/// normalized per component. The image is `W` wide and `D` tall.
#[derive(Debug, Clone, PartialEq)]
pub struct PcaImage {
    pub image: RgbImage,
    /// Set when the features span fewer than 3 dimensions; the image then
    /// shows the first 3 channels instead.
    pub degenerate: bool,
}

pub fn birdseye_pca_image(map: &VoxelGrid) -> Result<PcaImage, EvalError> {
    let c = map.channels;
    if c < 3 {
        return Err(EvalError::TooFewChannels(c));
    }
    let [w, h, d] = map.spec.resolution;
    let cells = w * d;
    // row per (z, x) pixel, row-major image order
    let mut feats = DMatrix::<f64>::zeros(cells, c);
    for z in 0..d {
        for x in 0..w {
            let row = z * w + x;
            for y in 0..h {
                let v = map.voxel([x, y, z]);
                for ch in 0..c {
                    feats[(row, ch)] += v[ch] / h as f64;
                }
            }
        }
    }
    let mean = feats.row_mean();
    let mut centered = feats.clone();
    for mut r in centered.row_iter_mut() {
        r -= &mean;
    }
    let cov = centered.transpose() * &centered / cells.max(1) as f64;
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..c).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let top = eig.eigenvalues[order[0]].max(0.0);
    let degenerate = !(top > 1e-12) || eig.eigenvalues[order[2]] <= 1e-9 * top;
    let projected: Vec<[f64; 3]> = (0..cells)
        .map(|r| {
            let mut out = [0.0; 3];
            for (k, o) in out.iter_mut().enumerate() {
                *o = if degenerate {
                    feats[(r, k)]
                } else {
                    centered.row(r).dot(&eig.eigenvectors.column(order[k]).transpose())
                };
            }
            out
        })
        .collect();
    let mut data = vec![0.0; cells * 3];
    for k in 0..3 {
        let lo = projected.iter().map(|p| p[k]).fold(f64::INFINITY, f64::min);
        let hi = projected.iter().map(|p| p[k]).fold(f64::NEG_INFINITY, f64::max);
        let span = hi - lo;
        for (i, p) in projected.iter().enumerate() {
            data[i * 3 + k] = if span > 1e-12 { (p[k] - lo) / span } else { 0.5 };
        }
    }
    Ok(PcaImage { image: RgbImage { width: w, height: d, data }, degenerate })
}

/// Fraction of occupied voxels per vertical column, as a gray image.
pub fn birdseye_occupancy_image(input: &VoxelGrid) -> RgbImage {
    let [w, h, d] = input.spec.resolution;
    let mut data = vec![0.0; w * d * 3];
    for z in 0..d {
        for x in 0..w {
            let n = (0..h).filter(|&y| input.occupied(input.spec.linear_index([x, y, z]))).count();
            let v = n as f64 / h as f64;
            data[(z * w + x) * 3..(z * w + x) * 3 + 3].fill(v);
        }
    }
    RgbImage { width: w, height: d, data }
}

/// A tracker under evaluation.
#[derive(Debug, Clone)]
pub enum Method<'a> {
    /// Outputs the initial box at every frame.
    ZeroMotion,
    Encoder {
        params: &'a EncoderParams,
        tracker: TrackerConfig,
    },
}

#[derive(Debug, Clone)]
pub struct MethodSpec<'a> {
    pub name: String,
    pub method: Method<'a>,
}

/// Method list of the standard comparison: the trained tracker, the
/// zero-motion and random-feature baselines, and ablations without search
/// regions (full and half resolution) and without static-point selection.
pub fn standard_methods<'a>(
    trained: &'a EncoderParams,
    random: &'a EncoderParams,
    without_static_selection: Option<&'a EncoderParams>,
    tracker: &TrackerConfig,
) -> Vec<MethodSpec<'a>> {
    let enc = |name: &str, params: &'a EncoderParams, tracker: TrackerConfig| MethodSpec {
        name: name.into(),
        method: Method::Encoder { params, tracker },
    };
    let global = TrackerConfig { search: None, ..tracker.clone() };
    let half = TrackerConfig { global_grid: tracker.global_grid.rescaled(1, 2), ..global.clone() };
    let mut out = vec![
        enc("trained", trained, tracker.clone()),
        MethodSpec { name: "zero_motion".into(), method: Method::ZeroMotion },
        enc("random_features", random, tracker.clone()),
        enc("no_search_region", trained, global),
        enc("no_search_region_half_res", trained, half),
    ];
    if let Some(p) = without_static_selection {
        out.push(enc("no_static_selection", p, tracker.clone()));
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchmarkConfig {
    pub report_frames: Vec<usize>,
    /// Total ground-truth path length separating static from moving objects.
    pub moving_threshold: f64,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        BenchmarkConfig { report_frames: vec![2, 4, 6, 8], moving_threshold: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodReport {
    pub name: String,
    pub all: IouCurve,
    pub stationary: Option<IouCurve>,
    pub moving: Option<IouCurve>,
    /// IOU at each report frame over all sequences.
    pub iou_at: BTreeMap<usize, f64>,
    pub lost_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub sequences: usize,
    pub stationary_sequences: usize,
    pub moving_sequences: usize,
    pub methods: Vec<MethodReport>,
}

impl BenchmarkReport {
    pub fn method(&self, name: &str) -> Option<&MethodReport> {
        self.methods.iter().find(|m| m.name == name)
    }

    /// One row per method and split with an `iou@F` column per report
    /// frame, after `#`-prefixed preamble lines.
    pub fn write_table_csv<W: Write>(
        &self,
        mut w: W,
        report_frames: &[usize],
        preamble: &[String],
    ) -> std::io::Result<()> {
        for line in preamble {
            writeln!(w, "# {line}")?;
        }
        write!(w, "method,split,sequences")?;
        for f in report_frames {
            write!(w, ",iou@{f}")?;
        }
        writeln!(w, ",lost_fraction")?;
        for m in &self.methods {
            let splits = [
                ("all", Some(&m.all), self.sequences),
                ("stationary", m.stationary.as_ref(), self.stationary_sequences),
                ("moving", m.moving.as_ref(), self.moving_sequences),
            ];
            for (split, curve, n) in splits {
                let Some(c) = curve else { continue };
                write!(w, "{},{},{}", m.name, split, n)?;
                for &f in report_frames {
                    match c.at(f) {
                        Some(v) => write!(w, ",{v:.6}")?,
                        None => write!(w, ",")?,
                    }
                }
                writeln!(w, ",{:.6}", m.lost_fraction)?;
            }
        }
        Ok(())
    }

    /// Rows `method,frame,mean_iou,split`, after `#`-prefixed preamble lines.
    pub fn write_csv<W: Write>(&self, mut w: W, preamble: &[String]) -> std::io::Result<()> {
        for line in preamble {
            writeln!(w, "# {line}")?;
        }
        writeln!(w, "method,frame,mean_iou,split")?;
        for m in &self.methods {
            for (split, curve) in
                [("all", Some(&m.all)), ("stationary", m.stationary.as_ref()), ("moving", m.moving.as_ref())]
            {
                if let Some(c) = curve {
                    for (f, v) in c.frames.iter().zip(&c.values) {
                        writeln!(w, "{},{},{:.6},{}", m.name, f, v, split)?;
                    }
                }
            }
        }
        Ok(())
    }
}

/// Total center path length of a ground-truth track.
pub fn path_length(track: &[Box3D]) -> f64 {
    track.windows(2).map(|w| (w[1].center - w[0].center).norm()).sum()
}

/// Predicted boxes of one method for every sequence, plus lost flags.
#[derive(Debug, Clone, PartialEq)]
pub struct MethodTrajectories {
    pub name: String,
    pub trajectories: Vec<Vec<Box3D>>,
    pub lost: Vec<bool>,
}

/// Scores precomputed trajectories against `ground_truths`, split into
/// stationary and moving sequences by ground-truth path length.
pub fn evaluate_trajectories(
    methods: &[MethodTrajectories],
    ground_truths: &[Vec<Box3D>],
    cfg: &BenchmarkConfig,
) -> Result<BenchmarkReport, EvalError> {
    if ground_truths.is_empty() {
        return Err(EvalError::Empty);
    }
    let moving: Vec<bool> = ground_truths.iter().map(|g| path_length(g) >= cfg.moving_threshold).collect();
    let mut reports = Vec::with_capacity(methods.len());
    for m in methods {
        if m.trajectories.len() != ground_truths.len() || m.lost.len() != ground_truths.len() {
            return Err(EvalError::LengthMismatch(format!(
                "{}: {} trajectories for {} sequences",
                m.name,
                m.trajectories.len(),
                ground_truths.len()
            )));
        }
        let all = iou_curve(&m.trajectories, ground_truths)?;
        let subset = |want: bool| -> Result<Option<IouCurve>, EvalError> {
            let (t, g): (Vec<_>, Vec<_>) = m
                .trajectories
                .iter()
                .zip(ground_truths)
                .zip(&moving)
                .filter(|(_, &mv)| mv == want)
                .map(|((t, g), _)| (t.clone(), g.clone()))
                .unzip();
            if t.is_empty() {
                Ok(None)
            } else {
                iou_curve(&t, &g).map(Some)
            }
        };
        let iou_at = cfg.report_frames.iter().filter_map(|&f| all.at(f).map(|v| (f, v))).collect();
        let lost = m.lost.iter().filter(|&&l| l).count();
        reports.push(MethodReport {
            name: m.name.clone(),
            stationary: subset(false)?,
            moving: subset(true)?,
            all,
            iou_at,
            lost_fraction: lost as f64 / ground_truths.len() as f64,
        });
    }
    let n_moving = moving.iter().filter(|&&m| m).count();
    Ok(BenchmarkReport {
        sequences: ground_truths.len(),
        stationary_sequences: ground_truths.len() - n_moving,
        moving_sequences: n_moving,
        methods: reports,
    })
}

/// Tracks every ground-truth object of every episode with every method.
pub fn run_benchmark(
    methods: &[MethodSpec<'_>],
    episodes: &[Episode],
    cfg: &BenchmarkConfig,
) -> Result<BenchmarkReport, EvalError> {
    let gts: Vec<Vec<Box3D>> = episodes.iter().flat_map(|e| e.gt_boxes.iter().cloned()).collect();
    if gts.is_empty() {
        return Err(EvalError::Empty);
    }
    let mut runs = Vec::with_capacity(methods.len());
    for m in methods {
        let per_episode: Vec<Result<Vec<(Vec<Box3D>, bool)>, EvalError>> = episodes
            .par_iter()
            .map(|ep| {
                let boxes0: Vec<Box3D> = ep.gt_boxes.iter().map(|t| t[0]).collect();
                match &m.method {
                    Method::ZeroMotion => Ok(boxes0.iter().map(|b| (vec![*b; ep.frame_count()], false)).collect()),
                    Method::Encoder { params, tracker } => Ok(track_objects(ep, &boxes0, params, tracker)?
                        .into_iter()
                        .map(|s| {
                            let lost = s.lost.iter().any(|&l| l);
                            (s.boxes, lost)
                        })
                        .collect()),
                }
            })
            .collect();
        let mut run = MethodTrajectories {
            name: m.name.clone(),
            trajectories: Vec::with_capacity(gts.len()),
            lost: Vec::with_capacity(gts.len()),
        };
        for r in per_episode {
            for (t, l) in r? {
                run.trajectories.push(t);
                run.lost.push(l);
            }
        }
        runs.push(run);
    }
    evaluate_trajectories(&runs, &gts, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::Vec3;
    use crate::grid::GridSpec;

    fn unit(center: Vec3) -> Box3D {
        Box3D::new(center, [1.0; 3], 0.0)
    }

    #[test]
    fn iou_basic_cases() {
        let a = unit(Vec3::zeros());
        assert!((iou_3d(&a, &a) - 1.0).abs() < 1e-12);
        let b = unit(Vec3::new(0.5, 0.0, 0.0));
        assert!((iou_3d(&a, &b) - 1.0 / 3.0).abs() < 1e-12);
        let c = unit(Vec3::new(0.0, 0.0, 0.5));
        assert!((iou_3d(&a, &c) - 1.0 / 3.0).abs() < 1e-12);
        let v = unit(Vec3::new(0.0, 0.5, 0.0));
        assert!((iou_3d(&a, &v) - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(iou_3d(&a, &unit(Vec3::new(3.0, 0.0, 0.0))), 0.0);
        let spun = Box3D::new(Vec3::zeros(), [1.0; 3], std::f64::consts::FRAC_PI_2);
        assert!((iou_3d(&a, &spun) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn iou_rotated_square() {
        // a square rotated 45 degrees inside itself: octagon overlap
        let a = unit(Vec3::zeros());
        let b = Box3D::new(Vec3::zeros(), [1.0; 3], std::f64::consts::FRAC_PI_4);
        let octagon = 2.0 * (2f64.sqrt() - 1.0);
        assert!((iou_3d(&a, &b) - octagon / (2.0 - octagon)).abs() < 1e-12);
    }

    #[test]
    fn curve_cases() {
        let g: Vec<Box3D> = (0..5).map(|f| unit(Vec3::new(0.3 * f as f64, 0.0, 0.0))).collect();
        let perfect = iou_curve(&[g.clone()], &[g.clone()]).unwrap();
        assert!(perfect.values.iter().all(|&v| (v - 1.0).abs() < 1e-12));
        let still = vec![g[0]; 5];
        let zm = iou_curve(&[still], &[g.clone()]).unwrap();
        assert!(zm.values.windows(2).all(|w| w[1] <= w[0]));
        assert!(matches!(iou_curve(&[g.clone()], &[g[..3].to_vec()]), Err(EvalError::LengthMismatch(_))));
        assert!(matches!(iou_curve(&[], &[g]), Err(EvalError::LengthMismatch(_))));
    }

    fn map_with(f: impl Fn(usize, usize) -> Vec<f64>, c: usize) -> VoxelGrid {
        let spec = GridSpec::new(Vec3::zeros(), [6.0, 2.0, 4.0], [6, 2, 4]).unwrap();
        let mut g = VoxelGrid::zeros(spec, c);
        for x in 0..6 {
            for y in 0..2 {
                for z in 0..4 {
                    g.voxel_mut([x, y, z]).copy_from_slice(&f(x, z));
                }
            }
        }
        g
    }

    #[test]
    fn constant_map_is_degenerate_and_uniform() {
        let g = map_with(|_, _| vec![0.5, 0.5, 0.5, 0.5], 4);
        let out = birdseye_pca_image(&g).unwrap();
        assert!(out.degenerate);
        assert_eq!((out.image.width, out.image.height), (6, 4));
        assert!(out.image.data.iter().all(|&v| v == out.image.data[0]));
    }

    #[test]
    fn three_clusters_separate() {
        let g = map_with(
            |x, _| {
                let mut v = vec![0.0; 5];
                v[x / 2] = 1.0;
                v
            },
            5,
        );
        // three centered clusters span only two dimensions, so this also
        // exercises the channel fallback
        let out = birdseye_pca_image(&g).unwrap();
        let region = |x: usize| x / 2;
        let mut within = 0.0;
        let mut across = 0.0;
        let (mut nw, mut na) = (0, 0);
        for a in 0..24 {
            for b in 0..24 {
                let (pa, pb) = (out.image.pixel(a % 6, a / 6), out.image.pixel(b % 6, b / 6));
                let d: f64 = (0..3).map(|k| (pa[k] - pb[k]).powi(2)).sum();
                if region(a % 6) == region(b % 6) {
                    within += d;
                    nw += 1;
                } else {
                    across += d;
                    na += 1;
                }
            }
        }
        assert!(within / (nw as f64) < 1e-12);
        assert!(across / (na as f64) > 0.1);
    }

    #[test]
    fn ppm_layout() {
        let img = RgbImage { width: 2, height: 1, data: vec![0.0, 0.5, 1.0, 1.0, 1.0, 1.0] };
        let mut buf = Vec::new();
        write_ppm(&mut buf, &img, &[]).unwrap();
        assert_eq!(&buf[..11], b"P6\n2 1\n255\n");
        assert_eq!(&buf[11..], &[0, 128, 255, 255, 255, 255]);
    }
}
