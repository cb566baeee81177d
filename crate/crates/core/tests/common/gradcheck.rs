//! Central finite-difference checks of every differentiable primitive, the
//! contrastive loss alone and through the encoder, and the reliability BCE.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use voxtrack::learn::{contrastive_loss, ReliabilityParams, ReliabilitySpec};
use voxtrack::net::ops::{
    concat_channels, conv3d, conv3d_backward, conv_transpose3d, conv_transpose3d_backward, l2_normalize,
    l2_normalize_backward, leaky_relu, leaky_relu_backward, split_channels, ConvGeometry, Volume,
};
use voxtrack::net::{EncoderParams, EncoderSpec};

pub const STEP: f64 = 1e-6;
/// Gradients smaller than this are compared absolutely.
pub const FLOOR: f64 = 1e-7;

#[derive(Debug, Clone)]
pub struct GradReport {
    pub name: String,
    pub probes: usize,
    pub worst_relative_error: f64,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FLOOR)
}

fn random_volume(rng: &mut ChaCha8Rng, dims: [usize; 3], channels: usize) -> Volume {
    let n = dims[0] * dims[1] * dims[2] * channels;
    Volume::new(dims, channels, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Probes `count` random coordinates of `x` and compares `grad` with the
/// central difference of `f`. `skip` rejects coordinates (kinks).
fn probe<F, S>(rng: &mut ChaCha8Rng, x: &[f64], grad: &[f64], count: usize, f: F, skip: S) -> f64
where
    F: Fn(&[f64]) -> f64,
    S: Fn(&[f64], usize) -> bool,
{
    let mut worst: f64 = 0.0;
    let mut done = 0;
    let mut xs = x.to_vec();
    while done < count {
        let i = rng.gen_range(0..x.len());
        if skip(x, i) {
            continue;
        }
        let orig = xs[i];
        xs[i] = orig + STEP;
        let up = f(&xs);
        xs[i] = orig - STEP;
        let down = f(&xs);
        xs[i] = orig;
        worst = worst.max(relative_error(grad[i], (up - down) / (2.0 * STEP)));
        done += 1;
    }
    worst
}

fn no_skip(_: &[f64], _: usize) -> bool {
    false
}

pub fn check_conv(seed: u64, probes: usize) -> Vec<GradReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let geo = ConvGeometry::same(4, 2).unwrap();
    let (cin, cout) = (3, 2);
    let x = random_volume(&mut rng, [4, 4, 4], cin);
    let w: Vec<f64> = (0..geo.taps() * cin * cout).map(|_| rng.gen_range(-0.5..0.5)).collect();
    let b: Vec<f64> = (0..cout).map(|_| rng.gen_range(-0.5..0.5)).collect();
    let r = random_volume(&mut rng, [2, 2, 2], cout);
    let (gw, gb, gx) = conv3d_backward(&x, &w, &r, geo, true).unwrap();
    let gx = gx.unwrap();
    let loss = |x: &Volume, w: &[f64], b: &[f64]| dot(&conv3d(x, w, b, geo).unwrap().data, &r.data);
    let wx = probe(&mut rng, &w, &gw, probes, |v| loss(&x, v, &b), no_skip);
    let bx = probe(&mut rng, &b, &gb, probes, |v| loss(&x, &w, v), no_skip);
    let xx = probe(
        &mut rng,
        &x.data,
        &gx.data,
        probes,
        |v| loss(&Volume::new(x.dims, cin, v.to_vec()).unwrap(), &w, &b),
        no_skip,
    );
    vec![report("conv3d weights", probes, wx), report("conv3d bias", probes, bx), report("conv3d input", probes, xx)]
}

pub fn check_conv_transpose(seed: u64, probes: usize) -> Vec<GradReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let geo = ConvGeometry::same(4, 2).unwrap();
    let (cin, cout) = (3, 2);
    let x = random_volume(&mut rng, [2, 2, 2], cin);
    let w: Vec<f64> = (0..geo.taps() * cin * cout).map(|_| rng.gen_range(-0.5..0.5)).collect();
    let b: Vec<f64> = (0..cout).map(|_| rng.gen_range(-0.5..0.5)).collect();
    let r = random_volume(&mut rng, [4, 4, 4], cout);
    let (gw, gb, gx) = conv_transpose3d_backward(&x, &w, &r, geo, true).unwrap();
    let gx = gx.unwrap();
    let loss = |x: &Volume, w: &[f64], b: &[f64]| dot(&conv_transpose3d(x, w, b, geo).unwrap().data, &r.data);
    let wx = probe(&mut rng, &w, &gw, probes, |v| loss(&x, v, &b), no_skip);
    let bx = probe(&mut rng, &b, &gb, probes, |v| loss(&x, &w, v), no_skip);
    let xx = probe(
        &mut rng,
        &x.data,
        &gx.data,
        probes,
        |v| loss(&Volume::new(x.dims, cin, v.to_vec()).unwrap(), &w, &b),
        no_skip,
    );
    vec![
        report("transposed conv weights", probes, wx),
        report("transposed conv bias", probes, bx),
        report("transposed conv input", probes, xx),
    ]
}

pub fn check_pointwise(seed: u64, probes: usize) -> Vec<GradReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dims = [3, 3, 3];
    let x = random_volume(&mut rng, dims, 4);
    let r = random_volume(&mut rng, dims, 4);

    let g = leaky_relu_backward(&x, &r);
    let near_kink = |v: &[f64], i: usize| v[i].abs() < 1e-3;
    let relu = probe(
        &mut rng,
        &x.data,
        &g.data,
        probes,
        |v| dot(&leaky_relu(&Volume::new(dims, 4, v.to_vec()).unwrap()).data, &r.data),
        near_kink,
    );

    let g = l2_normalize_backward(&x, &r);
    let norm = probe(
        &mut rng,
        &x.data,
        &g.data,
        probes,
        |v| dot(&l2_normalize(&Volume::new(dims, 4, v.to_vec()).unwrap()).data, &r.data),
        no_skip,
    );

    let a = random_volume(&mut rng, dims, 2);
    let b = random_volume(&mut rng, dims, 3);
    let rc = random_volume(&mut rng, dims, 5);
    let (ga, gb) = split_channels(&rc, 2);
    let cat_a = probe(
        &mut rng,
        &a.data,
        &ga.data,
        probes,
        |v| dot(&concat_channels(&Volume::new(dims, 2, v.to_vec()).unwrap(), &b).unwrap().data, &rc.data),
        no_skip,
    );
    let cat_b = probe(
        &mut rng,
        &b.data,
        &gb.data,
        probes,
        |v| dot(&concat_channels(&a, &Volume::new(dims, 3, v.to_vec()).unwrap()).unwrap().data, &rc.data),
        no_skip,
    );
    vec![
        report("leaky relu", probes, relu),
        report("l2 normalize", probes, norm),
        report("concat skip (first)", probes, cat_a),
        report("concat skip (second)", probes, cat_b),
    ]
}

fn random_unit(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let v: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter().map(|x| x / norm).collect()
}

pub fn check_contrastive(seed: u64, probes: usize) -> Vec<GradReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dim = 16;
    let mi = random_unit(&mut rng, dim);
    let mj = random_unit(&mut rng, dim);
    let negs: Vec<Vec<f64>> = (0..32).map(|_| random_unit(&mut rng, dim)).collect();
    let refs: Vec<&[f64]> = negs.iter().map(|n| n.as_slice()).collect();
    let mut out = Vec::new();
    for include in [true, false] {
        let o = contrastive_loss(&mi, &mj, &refs, 0.07, include).unwrap();
        let gi = probe(
            &mut rng,
            &mi,
            &o.grad_i,
            probes,
            |v| contrastive_loss(v, &mj, &refs, 0.07, include).unwrap().loss,
            no_skip,
        );
        let gj = probe(
            &mut rng,
            &mj,
            &o.grad_j,
            probes,
            |v| contrastive_loss(&mi, v, &refs, 0.07, include).unwrap().loss,
            no_skip,
        );
        let tag = if include { "" } else { ", negatives-only denominator" };
        out.push(report(&format!("contrastive loss query{tag}"), probes, gi));
        out.push(report(&format!("contrastive loss key{tag}"), probes, gj));
    }
    out
}

/// Contrastive loss between two voxels of one encoder output, differentiated
/// through the whole network.
pub fn check_encoder_composite(seed: u64, probes: usize) -> Vec<GradReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let spec = EncoderSpec::tiny();
    let params = EncoderParams::init(spec.clone(), seed).unwrap();
    let dims = [4, 4, 4];
    let x = random_volume(&mut rng, dims, spec.input_channels);
    let c = spec.out_channels;
    let (p, q) = (5usize, 42usize);
    let negs: Vec<Vec<f64>> = (0..16).map(|_| random_unit(&mut rng, c)).collect();
    let refs: Vec<&[f64]> = negs.iter().map(|n| n.as_slice()).collect();
    let loss_of = |params: &EncoderParams, x: &Volume| {
        let (out, _) = params.forward_volume(x.clone()).unwrap();
        contrastive_loss(out.voxel(p), out.voxel(q), &refs, 0.07, true).unwrap().loss
    };
    let (out, cache) = params.forward_volume(x.clone()).unwrap();
    let o = contrastive_loss(out.voxel(p), out.voxel(q), &refs, 0.07, true).unwrap();
    let mut g = Volume::zeros(out.dims, c);
    g.data[p * c..(p + 1) * c].copy_from_slice(&o.grad_i);
    g.data[q * c..(q + 1) * c].copy_from_slice(&o.grad_j);
    let (grads, gx) = params.backward_volume(&cache, &g, true).unwrap();
    let flat_grad: Vec<f64> = grads.iter().flat_map(|t| t.data.iter().copied()).collect();
    let flat: Vec<f64> = (0..params.flat_len()).map(|i| params.get_flat(i)).collect();
    let pw = probe(
        &mut rng,
        &flat,
        &flat_grad,
        probes,
        |v| {
            let mut pp = params.clone();
            for (i, &val) in v.iter().enumerate() {
                pp.set_flat(i, val);
            }
            loss_of(&pp, &x)
        },
        no_skip,
    );
    let gx = gx.unwrap();
    let px = probe(
        &mut rng,
        &x.data,
        &gx.data,
        probes,
        |v| loss_of(&params, &Volume::new(dims, spec.input_channels, v.to_vec()).unwrap()),
        no_skip,
    );
    vec![
        report("encoder + contrastive loss, parameters", probes, pw),
        report("encoder + contrastive loss, input", probes, px),
    ]
}

pub fn check_reliability(seed: u64, probes: usize) -> Vec<GradReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let spec = ReliabilitySpec { channels: 8, hidden: 32 };
    let params = ReliabilityParams::init(spec, seed);
    let inputs: Vec<Vec<f64>> = (0..24).map(|_| (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
    let labels: Vec<f64> = (0..24).map(|i| (i % 2) as f64).collect();
    let refs: Vec<&[f64]> = inputs.iter().map(|v| v.as_slice()).collect();
    let (_, grads) = params.bce_loss_and_grads(&refs, &labels).unwrap();
    let flat: Vec<f64> = params.tensors.iter().flat_map(|t| t.data.iter().copied()).collect();
    let flat_grad: Vec<f64> = grads.iter().flat_map(|t| t.data.iter().copied()).collect();
    let worst = probe(
        &mut rng,
        &flat,
        &flat_grad,
        probes,
        |v| {
            let mut pp = params.clone();
            let mut k = 0;
            for t in &mut pp.tensors {
                for d in &mut t.data {
                    *d = v[k];
                    k += 1;
                }
            }
            pp.bce_loss_and_grads(&refs, &labels).unwrap().0
        },
        no_skip,
    );
    vec![report("reliability BCE", probes, worst)]
}

fn report(name: &str, probes: usize, worst: f64) -> GradReport {
    GradReport { name: name.into(), probes, worst_relative_error: worst }
}

pub fn check_all(seed: u64, probes: usize) -> Vec<GradReport> {
    let mut out = check_conv(seed, probes);
    out.extend(check_conv_transpose(seed + 1, probes));
    out.extend(check_pointwise(seed + 2, probes));
    out.extend(check_contrastive(seed + 3, probes));
    out.extend(check_encoder_composite(seed + 4, probes));
    out.extend(check_reliability(seed + 5, probes));
    out
}
