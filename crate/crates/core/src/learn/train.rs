use super::{
    contrastive_loss, correspondence_candidates, make_reliability_labels, sample_static_correspondences, KeyEncoder,
    LearnError, NegativeDictionary, ReliabilityParams, ReliabilitySpec, TrainConfig,
};
use crate::geom::Vec3;
use crate::grid::{make_search_region, GridSpec, VoxelGrid};
use crate::net::{adam_step, momentum_update, EncoderParams, OptimState};
use crate::sim::Episode;
use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::Write;

/// Two sets of `(frame, camera)` views of one episode, voxelized into the
/// same world-aligned crop.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewPair {
    pub episode: usize,
    pub views_i: Vec<(usize, usize)>,
    pub views_j: Vec<(usize, usize)>,
    pub spec: GridSpec,
}

impl ViewPair {
    pub fn frames(&self) -> (usize, usize) {
        (self.views_i[0].0, self.views_j[0].0)
    }
}

/// Static episodes pool every `(frame, camera)` view and split a random
/// draw between the two sides. Dynamic episodes put each side on its own
/// frame, at most `max_frame_gap` apart.
pub fn sample_view_pair<R: Rng>(episodes: &[Episode], pool: &[usize], cfg: &TrainConfig, rng: &mut R) -> ViewPair {
    let episode = pool[rng.gen_range(0..pool.len())];
    let ep = &episodes[episode];
    let frames = ep.frame_count();
    let cams = ep.camera_count();
    let k = cfg.cameras_per_view;
    let (views_i, views_j) = if ep.is_static {
        let mut all: Vec<(usize, usize)> = (0..frames).flat_map(|f| (0..cams).map(move |c| (f, c))).collect();
        all.shuffle(rng);
        let ki = k.min(all.len().div_ceil(2)).max(1);
        let kj = k.min(all.len() - ki).max(1);
        let vi = all[..ki].to_vec();
        let vj = if all.len() > ki { all[ki..ki + kj].to_vec() } else { vi.clone() };
        (vi, vj)
    } else {
        let a = rng.gen_range(0..frames);
        let gap = rng.gen_range(1..=cfg.max_frame_gap.max(1));
        let b = if a + gap < frames {
            a + gap
        } else if a >= gap {
            a - gap
        } else {
            (a + 1) % frames
        };
        let pick = |f: usize, rng: &mut R| -> Vec<(usize, usize)> {
            index::sample(rng, cams, k.min(cams)).into_iter().map(|c| (f, c)).collect()
        };
        let vi = pick(a, rng);
        let vj = pick(b, rng);
        (vi, vj)
    };
    let r = cfg.crop_center_range;
    let center = Vec3::new(rng.gen_range(-r..=r), cfg.crop_center_y, rng.gen_range(-r..=r));
    ViewPair { episode, views_i, views_j, spec: make_search_region(&center, &cfg.crop) }
}

/// Ground-truth static flags on `spec`: a voxel is static when its center
/// lies outside every mover's box, grown by half a voxel, in both frames.
pub fn oracle_static_mask(ep: &Episode, frames: (usize, usize), spec: &GridSpec) -> Vec<bool> {
    let margin = spec.voxel_size().max() / 2.0;
    let boxes: Vec<_> = ep
        .gt_boxes
        .iter()
        .flat_map(|track| [track[frames.0], track[frames.1]])
        .map(|b| {
            let mut g = b;
            for d in g.dims.iter_mut() {
                *d += 2.0 * margin;
            }
            g
        })
        .collect();
    (0..spec.num_voxels())
        .map(|li| {
            let p = spec.voxel_center(spec.unravel(li));
            !boxes.iter().any(|b| b.contains(&p))
        })
        .collect()
}

/// How stage 3 decides which voxels count as static.
#[derive(Debug, Clone, Copy)]
pub enum StaticSelection<'a> {
    /// Every voxel.
    All,
    /// Voxels where the reliability net reaches `threshold`.
    Reliability { params: &'a ReliabilityParams, threshold: f64 },
    /// Ground-truth mover boxes removed.
    Oracle,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub stage: u8,
    pub iteration: usize,
    pub loss: f64,
    pub retrieval_top1: Option<f64>,
}

/// Rows as `stage,iteration,loss,retrieval_top1`, after `#`-prefixed
/// preamble lines.
pub fn write_metrics_csv<W: Write>(mut w: W, preamble: &[String], rows: &[MetricRow]) -> std::io::Result<()> {
    for line in preamble {
        writeln!(w, "# {line}")?;
    }
    writeln!(w, "stage,iteration,loss,retrieval_top1")?;
    for r in rows {
        let top1 = r.retrieval_top1.map(|v| format!("{v:.6}")).unwrap_or_default();
        writeln!(w, "{},{},{:.9},{}", r.stage, r.iteration, r.loss, top1)?;
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub encoder: EncoderParams,
    pub slow: EncoderParams,
    pub metrics: Vec<MetricRow>,
    /// Iterations that produced no usable correspondences.
    pub skipped: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RetrievalConfig {
    pub scene_pairs: usize,
    pub probes_per_pair: usize,
    pub candidates: usize,
    /// Cameras fused into each side of a probe pair, independent of training.
    pub cameras_per_view: usize,
    pub seed: u64,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        RetrievalConfig { scene_pairs: 40, probes_per_pair: 25, candidates: 1024, cameras_per_view: 2, seed: 0x5EED }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Fraction of probes whose true correspondent scores strictly highest
/// among itself and up to `candidates - 1` other occupied voxels of the
/// second view. Probes avoid ground-truth movers.
pub fn retrieval_top1(
    encoder: &EncoderParams,
    episodes: &[Episode],
    cfg: &TrainConfig,
    rcfg: &RetrievalConfig,
) -> Result<f64, LearnError> {
    if episodes.is_empty() {
        return Err(LearnError::DataMissing("retrieval".into()));
    }
    let cfg = &TrainConfig { cameras_per_view: rcfg.cameras_per_view, ..cfg.clone() };
    let mut rng = ChaCha8Rng::seed_from_u64(rcfg.seed);
    let pool: Vec<usize> = (0..episodes.len()).collect();
    let mut hits = 0usize;
    let mut total = 0usize;
    for _ in 0..rcfg.scene_pairs {
        let pair = sample_view_pair(episodes, &pool, cfg, &mut rng);
        let ep = &episodes[pair.episode];
        let input_i = ep.voxelize(&pair.views_i, &pair.spec)?;
        let input_j = ep.voxelize(&pair.views_j, &pair.spec)?;
        let map_i = encoder.forward(&input_i)?;
        let map_j = encoder.forward(&input_j)?;
        let mask = oracle_static_mask(ep, pair.frames(), &map_i.spec);
        let probes = correspondence_candidates(&input_i, &input_j, &map_i, &map_j, &mask)?;
        let occupied_j: Vec<usize> =
            super::occupancy_on_map(&input_j, &map_j).iter().enumerate().filter_map(|(v, &o)| o.then_some(v)).collect();
        if probes.is_empty() {
            continue;
        }
        let chosen = index::sample(&mut rng, probes.len(), rcfg.probes_per_pair.min(probes.len()));
        for k in chosen {
            let v = probes[k];
            let q = map_i.voxel_linear(v);
            let target = dot(q, map_j.voxel_linear(v));
            let others: Vec<usize> = occupied_j.iter().copied().filter(|&u| u != v).collect();
            let n = (rcfg.candidates.saturating_sub(1)).min(others.len());
            let beaten = index::sample(&mut rng, others.len(), n)
                .into_iter()
                .any(|c| dot(q, map_j.voxel_linear(others[c])) >= target);
            hits += usize::from(!beaten);
            total += 1;
        }
    }
    if total == 0 {
        return Err(LearnError::NoCorrespondences);
    }
    Ok(hits as f64 / total as f64)
}

struct Contrastive<'a> {
    cfg: &'a TrainConfig,
    fast: EncoderParams,
    slow: EncoderParams,
    optim: OptimState,
    dict: NegativeDictionary,
    rng: ChaCha8Rng,
}

impl<'a> Contrastive<'a> {
    fn new(cfg: &'a TrainConfig, init: EncoderParams, seed: u64) -> Self {
        let optim = OptimState::new(&init.tensors, cfg.learning_rate);
        let dim = init.spec.out_channels;
        Contrastive {
            cfg,
            slow: init.clone(),
            fast: init,
            optim,
            dict: NegativeDictionary::new(cfg.dictionary_capacity, dim),
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// One optimization step; `None` when the iteration had to be skipped.
    fn step(
        &mut self,
        ep: &Episode,
        pair: &ViewPair,
        selection: StaticSelection<'_>,
    ) -> Result<Option<f64>, LearnError> {
        let input_i = ep.voxelize(&pair.views_i, &pair.spec)?;
        let input_j = ep.voxelize(&pair.views_j, &pair.spec)?;
        let (map_i, cache_i) = self.fast.forward_cached(&input_i)?;
        let (map_j, cache_j) = match self.cfg.key_encoder {
            KeyEncoder::Slow => (self.slow.forward(&input_j)?, None),
            KeyEncoder::Fast => {
                let (m, c) = self.fast.forward_cached(&input_j)?;
                (m, Some(c))
            }
        };
        let mask = match selection {
            StaticSelection::All => vec![true; map_i.spec.num_voxels()],
            StaticSelection::Oracle => oracle_static_mask(ep, pair.frames(), &map_i.spec),
            StaticSelection::Reliability { params, threshold } => {
                let fast_j = match cache_j {
                    Some(_) => map_j.clone(),
                    None => self.fast.forward(&input_j)?,
                };
                let mut diff = map_i.clone();
                for (d, b) in diff.data.iter_mut().zip(&fast_j.data) {
                    *d -= b;
                }
                params.forward(&diff)?.data.iter().map(|&p| p >= threshold).collect()
            }
        };
        let pairs = match sample_static_correspondences(
            &input_i,
            &input_j,
            &map_i,
            &map_j,
            &mask,
            self.cfg.pairs_per_batch,
            &mut self.rng,
        ) {
            Ok(p) => p,
            Err(LearnError::NoCorrespondences) => return Ok(None),
            Err(e) => return Err(e),
        };
        if self.dict.is_empty() {
            self.fill_dictionary(&pairs, &map_j)?;
            return Ok(None);
        }

        let c = map_i.channels;
        let mut grad_i = VoxelGrid::zeros(map_i.spec, c);
        let mut grad_j = VoxelGrid::zeros(map_j.spec, c);
        let scale = 1.0 / pairs.len() as f64;
        let mut total = 0.0;
        for p in &pairs {
            let negatives = self.dict.sample(self.cfg.negatives_per_positive, &mut self.rng)?;
            let out = contrastive_loss(
                &p.m_i,
                &p.m_j,
                &negatives,
                self.cfg.temperature,
                self.cfg.include_positive_in_denominator,
            )?;
            total += out.loss;
            let li = map_i.spec.linear_index(p.index_i);
            for (g, v) in grad_i.data[li * c..(li + 1) * c].iter_mut().zip(&out.grad_i) {
                *g += v * scale;
            }
            let lj = map_j.spec.linear_index(p.index_j);
            for (g, v) in grad_j.data[lj * c..(lj + 1) * c].iter_mut().zip(&out.grad_j) {
                *g += v * scale;
            }
        }
        let loss = total * scale;
        let (mut grads, _) = self.fast.backward(&cache_i, &grad_i, false)?;
        if let Some(cache_j) = &cache_j {
            let (gj, _) = self.fast.backward(cache_j, &grad_j, false)?;
            for (a, b) in grads.iter_mut().zip(gj) {
                for (x, y) in a.data.iter_mut().zip(b.data) {
                    *x += y;
                }
            }
        }
        adam_step(&mut self.fast.tensors, &grads, &mut self.optim)?;
        self.slow = momentum_update(&self.slow, &self.fast, self.cfg.momentum)?;
        self.fill_dictionary(&pairs, &map_j)?;
        Ok(Some(loss))
    }

    fn fill_dictionary(&mut self, pairs: &[super::CorrespondencePair], map_j: &VoxelGrid) -> Result<(), LearnError> {
        if self.cfg.dictionary_from_all_voxels {
            let n = map_j.spec.num_voxels();
            for v in index::sample(&mut self.rng, n, pairs.len().min(n)) {
                self.dict.push(map_j.voxel_linear(v))?;
            }
        } else {
            for p in pairs {
                self.dict.push(&p.m_j)?;
            }
        }
        Ok(())
    }
}

fn run_contrastive(
    stage: u8,
    episodes: &[Episode],
    pool: &[usize],
    heldout: &[Episode],
    init: EncoderParams,
    cfg: &TrainConfig,
    iterations: usize,
    selection: StaticSelection<'_>,
) -> Result<TrainOutcome, LearnError> {
    cfg.validate()?;
    if init.spec != cfg.encoder {
        return Err(LearnError::InvalidConfig("initial encoder does not match the configured spec".into()));
    }
    let seed = cfg.seed ^ (u64::from(stage) << 56);
    let mut t = Contrastive::new(cfg, init, seed);
    let mut pair_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7061_6972);
    let mut metrics = Vec::new();
    let mut skipped = 0;
    for it in 0..iterations {
        let pair = sample_view_pair(episodes, pool, cfg, &mut pair_rng);
        match t.step(&episodes[pair.episode], &pair, selection)? {
            Some(loss) => {
                if !loss.is_finite() {
                    return Err(LearnError::NonFinite(it));
                }
                let retrieval = if cfg.retrieval_every > 0 && (it + 1) % cfg.retrieval_every == 0 && !heldout.is_empty()
                {
                    Some(retrieval_top1(
                        &t.fast,
                        heldout,
                        cfg,
                        &RetrievalConfig { scene_pairs: 10, ..Default::default() },
                    )?)
                } else {
                    None
                };
                match retrieval {
                    Some(r) => log::info!("stage {stage} iteration {it}: loss {loss:.4} retrieval {r:.4}"),
                    None if it % 50 == 0 => log::info!("stage {stage} iteration {it}: loss {loss:.4}"),
                    None => {}
                }
                metrics.push(MetricRow { stage, iteration: it, loss, retrieval_top1: retrieval });
            }
            None => {
                skipped += 1;
                log::debug!("stage {stage} iteration {it}: skipped");
            }
        }
    }
    Ok(TrainOutcome { encoder: t.fast, slow: t.slow, metrics, skipped })
}

/// Contrastive training on static episodes, from `init` or a fresh
/// encoder seeded by the config.
pub fn train_stage1(
    episodes: &[Episode],
    heldout: &[Episode],
    init: Option<EncoderParams>,
    cfg: &TrainConfig,
) -> Result<TrainOutcome, LearnError> {
    let pool: Vec<usize> = (0..episodes.len()).filter(|&e| episodes[e].is_static).collect();
    if pool.is_empty() {
        return Err(LearnError::DataMissing("stage 1 (static episodes)".into()));
    }
    let init = match init {
        Some(p) => p,
        None => EncoderParams::init(cfg.encoder.clone(), cfg.seed)?,
    };
    run_contrastive(1, episodes, &pool, heldout, init, cfg, cfg.stage1_iterations, StaticSelection::All)
}

/// Contrastive finetuning on dynamic episodes, keeping only voxels the
/// selection marks static.
pub fn train_stage3_finetune(
    episodes: &[Episode],
    heldout: &[Episode],
    encoder: &EncoderParams,
    selection: StaticSelection<'_>,
    cfg: &TrainConfig,
) -> Result<TrainOutcome, LearnError> {
    let pool: Vec<usize> = (0..episodes.len()).filter(|&e| !episodes[e].is_static).collect();
    if pool.is_empty() {
        return Err(LearnError::DataMissing("stage 3 (dynamic episodes)".into()));
    }
    run_contrastive(3, episodes, &pool, heldout, encoder.clone(), cfg, cfg.stage3_iterations, selection)
}

const RELIABILITY_BATCH: usize = 256;

/// Labeled feature differences drawn from one static view pair: half
/// registered (label 1), half shuffled (label 0).
fn reliability_batch<R: Rng>(
    encoder: &EncoderParams,
    episodes: &[Episode],
    pool: &[usize],
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<Option<(Vec<Vec<f64>>, Vec<f64>)>, LearnError> {
    let pair = sample_view_pair(episodes, pool, cfg, rng);
    let ep = &episodes[pair.episode];
    let input_i = ep.voxelize(&pair.views_i, &pair.spec)?;
    let input_j = ep.voxelize(&pair.views_j, &pair.spec)?;
    let map_i = encoder.forward(&input_i)?;
    let map_j = encoder.forward(&input_j)?;
    let all = vec![true; map_i.spec.num_voxels()];
    let cand = correspondence_candidates(&input_i, &input_j, &map_i, &map_j, &all)?;
    if cand.len() < 2 {
        return Ok(None);
    }
    let mut mask = vec![false; all.len()];
    for &v in &cand {
        mask[v] = true;
    }
    let (pos, neg) = make_reliability_labels(&map_i, &map_j, Some(&mask), rng.gen())?;
    let half = (RELIABILITY_BATCH / 2).min(cand.len());
    let mut inputs = Vec::with_capacity(2 * half);
    let mut labels = Vec::with_capacity(2 * half);
    for k in index::sample(rng, cand.len(), half) {
        inputs.push(pos.voxel_linear(cand[k]).to_vec());
        labels.push(1.0);
    }
    for k in index::sample(rng, cand.len(), half) {
        inputs.push(neg.voxel_linear(cand[k]).to_vec());
        labels.push(0.0);
    }
    Ok(Some((inputs, labels)))
}

/// Trains the reliability net on registered versus shuffled feature
/// differences of static episodes. The encoder is only read.
pub fn train_stage2_reliability(
    episodes: &[Episode],
    encoder: &EncoderParams,
    cfg: &TrainConfig,
) -> Result<(ReliabilityParams, Vec<MetricRow>), LearnError> {
    cfg.validate()?;
    let pool: Vec<usize> = (0..episodes.len()).filter(|&e| episodes[e].is_static).collect();
    if pool.is_empty() {
        return Err(LearnError::DataMissing("stage 2 (static episodes)".into()));
    }
    let spec = ReliabilitySpec { channels: encoder.spec.out_channels, hidden: cfg.reliability_hidden };
    let mut params = ReliabilityParams::init(spec, cfg.seed ^ 0x2222);
    let mut optim = OptimState::new(&params.tensors, cfg.reliability_learning_rate);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (2u64 << 56));
    let mut metrics = Vec::new();
    for it in 0..cfg.stage2_iterations {
        let Some((inputs, labels)) = reliability_batch(encoder, episodes, &pool, cfg, &mut rng)? else {
            continue;
        };
        let refs: Vec<&[f64]> = inputs.iter().map(|v| v.as_slice()).collect();
        let (loss, grads) = params.bce_loss_and_grads(&refs, &labels)?;
        if !loss.is_finite() {
            return Err(LearnError::NonFinite(it));
        }
        adam_step(&mut params.tensors, &grads, &mut optim)?;
        metrics.push(MetricRow { stage: 2, iteration: it, loss, retrieval_top1: None });
    }
    Ok((params, metrics))
}

/// Accuracy of thresholding the reliability net at 0.5 on fresh labeled
/// batches drawn from `episodes`.
pub fn reliability_accuracy(
    params: &ReliabilityParams,
    encoder: &EncoderParams,
    episodes: &[Episode],
    cfg: &TrainConfig,
    batches: usize,
    seed: u64,
) -> Result<f64, LearnError> {
    let pool: Vec<usize> = (0..episodes.len()).filter(|&e| episodes[e].is_static).collect();
    if pool.is_empty() {
        return Err(LearnError::DataMissing("reliability evaluation".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut right, mut total) = (0usize, 0usize);
    for _ in 0..batches {
        if let Some((inputs, labels)) = reliability_batch(encoder, episodes, &pool, cfg, &mut rng)? {
            for (x, y) in inputs.iter().zip(&labels) {
                let pred = if params.probability(x) >= 0.5 { 1.0 } else { 0.0 };
                right += usize::from(pred == *y);
                total += 1;
            }
        }
    }
    if total == 0 {
        return Err(LearnError::NoCorrespondences);
    }
    Ok(right as f64 / total as f64)
}
