//! Channel-last 3D volume kernels.
//!
//! Strided convolution and transposed convolution share one index relation
//! between a coarse volume (index `x`) and a fine volume (index `y`):
//! `y = x * stride - pad + tap`. Every kernel below is written as a gather
//! over its output, so results do not depend on the worker count.

use super::NetError;
use rayon::prelude::*;

/// Negative-side slope of the leaky ReLU used between layers.
pub const LEAKY_SLOPE: f64 = 0.1;
/// Lower bound on the norm used by [`l2_normalize`].
pub const NORM_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    pub dims: [usize; 3],
    pub channels: usize,
    pub data: Vec<f64>,
}

impl Volume {
    pub fn zeros(dims: [usize; 3], channels: usize) -> Self {
        Volume { dims, channels, data: vec![0.0; dims[0] * dims[1] * dims[2] * channels] }
    }

    pub fn new(dims: [usize; 3], channels: usize, data: Vec<f64>) -> Result<Self, NetError> {
        if data.len() != dims[0] * dims[1] * dims[2] * channels {
            return Err(NetError::ShapeMismatch(format!("{dims:?}x{channels} volume with {} values", data.len())));
        }
        Ok(Volume { dims, channels, data })
    }

    pub fn num_voxels(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    pub fn voxel(&self, linear: usize) -> &[f64] {
        &self.data[linear * self.channels..(linear + 1) * self.channels]
    }
}

/// Geometry of one strided convolution layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeometry {
    /// Size-preserving padding: `(kernel - stride) / 2`.
    pub fn same(kernel: usize, stride: usize) -> Result<Self, NetError> {
        if stride == 0 || kernel < stride || (kernel - stride) % 2 != 0 {
            return Err(NetError::InvalidSpec(format!("kernel {kernel} with stride {stride} cannot preserve size")));
        }
        Ok(ConvGeometry { kernel, stride, pad: (kernel - stride) / 2 })
    }

    pub fn taps(&self) -> usize {
        self.kernel * self.kernel * self.kernel
    }

    fn coarse_dims(&self, fine: [usize; 3]) -> Result<[usize; 3], NetError> {
        let mut out = [0; 3];
        for a in 0..3 {
            if fine[a] % self.stride != 0 {
                return Err(NetError::ShapeMismatch(format!(
                    "extent {} not divisible by stride {}",
                    fine[a], self.stride
                )));
            }
            out[a] = fine[a] / self.stride;
        }
        Ok(out)
    }

    /// For each coarse index, the `(tap, fine index)` pairs along one axis.
    fn coarse_table(&self, coarse: usize, fine: usize) -> Vec<Vec<(usize, usize)>> {
        (0..coarse)
            .map(|x| {
                (0..self.kernel)
                    .filter_map(|a| {
                        let y = (x * self.stride + a) as isize - self.pad as isize;
                        (y >= 0 && (y as usize) < fine).then_some((a, y as usize))
                    })
                    .collect()
            })
            .collect()
    }

    /// For each fine index, the `(tap, coarse index)` pairs along one axis.
    fn fine_table(&self, coarse: usize, fine: usize) -> Vec<Vec<(usize, usize)>> {
        let mut table = vec![Vec::new(); fine];
        for x in 0..coarse {
            for a in 0..self.kernel {
                let y = (x * self.stride + a) as isize - self.pad as isize;
                if y >= 0 && (y as usize) < fine {
                    table[y as usize].push((a, x));
                }
            }
        }
        table
    }
}

#[inline]
fn axpy(acc: &mut [f64], v: f64, row: &[f64]) {
    for (a, w) in acc.iter_mut().zip(row) {
        *a += v * w;
    }
}

/// `coarse[x][o] = bias[o] + sum_{tap, i} fine[x*s-p+tap][i] * w[tap][i][o]`.
pub fn gather_coarse(
    fine: &Volume,
    w: &[f64],
    bias: Option<&[f64]>,
    geo: ConvGeometry,
    out_channels: usize,
) -> Result<Volume, NetError> {
    let cf = fine.channels;
    let cc = out_channels;
    if w.len() != geo.taps() * cf * cc {
        return Err(NetError::ShapeMismatch(format!(
            "weights have {} values, expected {}x{}x{}",
            w.len(),
            geo.taps(),
            cf,
            cc
        )));
    }
    let cd = geo.coarse_dims(fine.dims)?;
    let t: Vec<_> = (0..3).map(|a| geo.coarse_table(cd[a], fine.dims[a])).collect();
    let [_, fh, fd] = fine.dims;
    let k = geo.kernel;
    let mut out = Volume::zeros(cd, cc);
    let slab = cd[1] * cd[2] * cc;
    if slab == 0 {
        return Ok(out);
    }
    out.data.par_chunks_mut(slab).enumerate().for_each(|(x0, chunk)| {
        for x1 in 0..cd[1] {
            for x2 in 0..cd[2] {
                let o = (x1 * cd[2] + x2) * cc;
                let acc = &mut chunk[o..o + cc];
                if let Some(b) = bias {
                    acc.copy_from_slice(b);
                }
                for &(a0, y0) in &t[0][x0] {
                    for &(a1, y1) in &t[1][x1] {
                        for &(a2, y2) in &t[2][x2] {
                            let tap = (a0 * k + a1) * k + a2;
                            let fy = ((y0 * fh + y1) * fd + y2) * cf;
                            let src = &fine.data[fy..fy + cf];
                            let wt = &w[tap * cf * cc..(tap + 1) * cf * cc];
                            for (i, &v) in src.iter().enumerate() {
                                if v != 0.0 {
                                    axpy(acc, v, &wt[i * cc..(i + 1) * cc]);
                                }
                            }
                        }
                    }
                }
            }
        }
    });
    Ok(out)
}

/// `fine[y][o] = bias[o] + sum over (tap, x) with y = x*s-p+tap of
/// coarse[x][i] * w[tap][i][o]`.
pub fn gather_fine(
    coarse: &Volume,
    w: &[f64],
    bias: Option<&[f64]>,
    geo: ConvGeometry,
    fine_dims: [usize; 3],
    out_channels: usize,
) -> Result<Volume, NetError> {
    let cc = coarse.channels;
    let cf = out_channels;
    if w.len() != geo.taps() * cc * cf {
        return Err(NetError::ShapeMismatch(format!(
            "weights have {} values, expected {}x{}x{}",
            w.len(),
            geo.taps(),
            cc,
            cf
        )));
    }
    if geo.coarse_dims(fine_dims)? != coarse.dims {
        return Err(NetError::ShapeMismatch(format!(
            "coarse {:?} does not match fine {:?} at stride {}",
            coarse.dims, fine_dims, geo.stride
        )));
    }
    let t: Vec<_> = (0..3).map(|a| geo.fine_table(coarse.dims[a], fine_dims[a])).collect();
    let [_, ch, cd] = coarse.dims;
    let k = geo.kernel;
    let mut out = Volume::zeros(fine_dims, cf);
    let slab = fine_dims[1] * fine_dims[2] * cf;
    if slab == 0 {
        return Ok(out);
    }
    out.data.par_chunks_mut(slab).enumerate().for_each(|(y0, chunk)| {
        for y1 in 0..fine_dims[1] {
            for y2 in 0..fine_dims[2] {
                let o = (y1 * fine_dims[2] + y2) * cf;
                let acc = &mut chunk[o..o + cf];
                if let Some(b) = bias {
                    acc.copy_from_slice(b);
                }
                for &(a0, x0) in &t[0][y0] {
                    for &(a1, x1) in &t[1][y1] {
                        for &(a2, x2) in &t[2][y2] {
                            let tap = (a0 * k + a1) * k + a2;
                            let cx = ((x0 * ch + x1) * cd + x2) * cc;
                            let src = &coarse.data[cx..cx + cc];
                            let wt = &w[tap * cc * cf..(tap + 1) * cc * cf];
                            for (i, &v) in src.iter().enumerate() {
                                if v != 0.0 {
                                    axpy(acc, v, &wt[i * cf..(i + 1) * cf]);
                                }
                            }
                        }
                    }
                }
            }
        }
    });
    Ok(out)
}

/// `gw[tap][i][o] = sum_x fine[x*s-p+tap][i] * coarse[x][o]`.
pub fn correlate_weights(fine: &Volume, coarse: &Volume, geo: ConvGeometry) -> Result<Vec<f64>, NetError> {
    if geo.coarse_dims(fine.dims)? != coarse.dims {
        return Err(NetError::ShapeMismatch(format!("coarse {:?} does not match fine {:?}", coarse.dims, fine.dims)));
    }
    let cf = fine.channels;
    let cc = coarse.channels;
    let k = geo.kernel;
    let cd = coarse.dims;
    let [_, fh, fd] = fine.dims;
    // per axis and tap: the coarse indices whose fine partner is in range
    let valid: Vec<Vec<Vec<(usize, usize)>>> = (0..3)
        .map(|a| {
            (0..k)
                .map(|tap| {
                    (0..cd[a])
                        .filter_map(|x| {
                            let y = (x * geo.stride + tap) as isize - geo.pad as isize;
                            (y >= 0 && (y as usize) < fine.dims[a]).then_some((x, y as usize))
                        })
                        .collect()
                })
                .collect()
        })
        .collect();
    let mut gw = vec![0.0; geo.taps() * cf * cc];
    if cf * cc == 0 {
        return Ok(gw);
    }
    gw.par_chunks_mut(cf * cc).enumerate().for_each(|(tap, block)| {
        let a0 = tap / (k * k);
        let a1 = (tap / k) % k;
        let a2 = tap % k;
        for &(x0, y0) in &valid[0][a0] {
            for &(x1, y1) in &valid[1][a1] {
                for &(x2, y2) in &valid[2][a2] {
                    let fy = ((y0 * fh + y1) * fd + y2) * cf;
                    let cx = ((x0 * cd[1] + x1) * cd[2] + x2) * cc;
                    let src = &fine.data[fy..fy + cf];
                    let g = &coarse.data[cx..cx + cc];
                    for (i, &v) in src.iter().enumerate() {
                        if v != 0.0 {
                            axpy(&mut block[i * cc..(i + 1) * cc], v, g);
                        }
                    }
                }
            }
        }
    });
    Ok(gw)
}

/// Swaps the two channel axes of a `[taps][a][b]` weight tensor.
pub fn transpose_taps(w: &[f64], taps: usize, a: usize, b: usize) -> Vec<f64> {
    let mut out = vec![0.0; w.len()];
    for t in 0..taps {
        let src = &w[t * a * b..(t + 1) * a * b];
        let dst = &mut out[t * a * b..(t + 1) * a * b];
        for i in 0..a {
            for j in 0..b {
                dst[j * a + i] = src[i * b + j];
            }
        }
    }
    out
}

/// Sum of a volume over voxels, per channel.
pub fn channel_sums(v: &Volume) -> Vec<f64> {
    let mut s = vec![0.0; v.channels];
    for chunk in v.data.chunks_exact(v.channels.max(1)) {
        for (a, x) in s.iter_mut().zip(chunk) {
            *a += x;
        }
    }
    s
}

/// Forward strided convolution; weights laid out `[tap][in][out]`.
pub fn conv3d(x: &Volume, w: &[f64], b: &[f64], geo: ConvGeometry) -> Result<Volume, NetError> {
    gather_coarse(x, w, Some(b), geo, b.len())
}

/// Gradients of [`conv3d`]: `(grad_w, grad_b, grad_x)`.
pub fn conv3d_backward(
    x: &Volume,
    w: &[f64],
    grad_out: &Volume,
    geo: ConvGeometry,
    want_input_grad: bool,
) -> Result<(Vec<f64>, Vec<f64>, Option<Volume>), NetError> {
    let cin = x.channels;
    let cout = grad_out.channels;
    let gw = correlate_weights(x, grad_out, geo)?;
    let gb = channel_sums(grad_out);
    let gx = if want_input_grad {
        let wt = transpose_taps(w, geo.taps(), cin, cout);
        Some(gather_fine(grad_out, &wt, None, geo, x.dims, cin)?)
    } else {
        None
    };
    Ok((gw, gb, gx))
}

/// Forward transposed convolution (upsampling by the stride); weights laid
/// out `[tap][in][out]`.
pub fn conv_transpose3d(x: &Volume, w: &[f64], b: &[f64], geo: ConvGeometry) -> Result<Volume, NetError> {
    let fine = [x.dims[0] * geo.stride, x.dims[1] * geo.stride, x.dims[2] * geo.stride];
    gather_fine(x, w, Some(b), geo, fine, b.len())
}

pub fn conv_transpose3d_backward(
    x: &Volume,
    w: &[f64],
    grad_out: &Volume,
    geo: ConvGeometry,
    want_input_grad: bool,
) -> Result<(Vec<f64>, Vec<f64>, Option<Volume>), NetError> {
    let cin = x.channels;
    let cout = grad_out.channels;
    let gw_t = correlate_weights(grad_out, x, geo)?;
    let gw = transpose_taps(&gw_t, geo.taps(), cout, cin);
    let gb = channel_sums(grad_out);
    let gx = if want_input_grad {
        let wt = transpose_taps(w, geo.taps(), cin, cout);
        Some(gather_coarse(grad_out, &wt, None, geo, cin)?)
    } else {
        None
    };
    Ok((gw, gb, gx))
}

pub fn leaky_relu(x: &Volume) -> Volume {
    Volume {
        dims: x.dims,
        channels: x.channels,
        data: x.data.iter().map(|&v| if v > 0.0 { v } else { LEAKY_SLOPE * v }).collect(),
    }
}

/// Chains an upstream gradient through the leaky ReLU given its input.
pub fn leaky_relu_backward(pre: &Volume, grad_out: &Volume) -> Volume {
    Volume {
        dims: pre.dims,
        channels: pre.channels,
        data: pre.data.iter().zip(&grad_out.data).map(|(&p, &g)| if p > 0.0 { g } else { LEAKY_SLOPE * g }).collect(),
    }
}

/// Channel concatenation `[a | b]` of two volumes with equal spatial dims.
pub fn concat_channels(a: &Volume, b: &Volume) -> Result<Volume, NetError> {
    if a.dims != b.dims {
        return Err(NetError::ShapeMismatch(format!("cannot concat {:?} with {:?}", a.dims, b.dims)));
    }
    let c = a.channels + b.channels;
    let mut data = Vec::with_capacity(a.num_voxels() * c);
    for i in 0..a.num_voxels() {
        data.extend_from_slice(a.voxel(i));
        data.extend_from_slice(b.voxel(i));
    }
    Ok(Volume { dims: a.dims, channels: c, data })
}

/// Splits a concatenated gradient back into its `[a | b]` parts.
pub fn split_channels(g: &Volume, first: usize) -> (Volume, Volume) {
    let second = g.channels - first;
    let n = g.num_voxels();
    let mut a = Vec::with_capacity(n * first);
    let mut b = Vec::with_capacity(n * second);
    for i in 0..n {
        let v = g.voxel(i);
        a.extend_from_slice(&v[..first]);
        b.extend_from_slice(&v[first..]);
    }
    (Volume { dims: g.dims, channels: first, data: a }, Volume { dims: g.dims, channels: second, data: b })
}

/// Per-voxel `v / max(|v|, NORM_FLOOR)`.
pub fn l2_normalize(x: &Volume) -> Volume {
    let mut out = x.clone();
    for chunk in out.data.chunks_exact_mut(x.channels.max(1)) {
        let n = chunk.iter().map(|v| v * v).sum::<f64>().sqrt().max(NORM_FLOOR);
        for v in chunk.iter_mut() {
            *v /= n;
        }
    }
    out
}

pub fn l2_normalize_backward(pre: &Volume, grad_out: &Volume) -> Volume {
    let c = pre.channels.max(1);
    let mut out = grad_out.clone();
    for (g, v) in out.data.chunks_exact_mut(c).zip(pre.data.chunks_exact(c)) {
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > NORM_FLOOR {
            // (I - y yᵀ) g / |v| with y = v / |v|
            let dot: f64 = g.iter().zip(v).map(|(a, b)| a * b).sum::<f64>() / norm;
            for (gi, vi) in g.iter_mut().zip(v) {
                *gi = (*gi - vi / norm * dot) / norm;
            }
        } else {
            for gi in g.iter_mut() {
                *gi /= NORM_FLOOR;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_volume(rng: &mut ChaCha8Rng, dims: [usize; 3], c: usize, sparsity: f64) -> Volume {
        let n = dims[0] * dims[1] * dims[2] * c;
        let data = (0..n).map(|_| if rng.gen_bool(sparsity) { 0.0 } else { rng.gen_range(-1.0..1.0) }).collect();
        Volume::new(dims, c, data).unwrap()
    }

    /// Direct scatter-form convolution used as an independent reference.
    fn naive_conv(x: &Volume, w: &[f64], b: &[f64], geo: ConvGeometry) -> Volume {
        let cout = b.len();
        let cd = [x.dims[0] / geo.stride, x.dims[1] / geo.stride, x.dims[2] / geo.stride];
        let mut out = Volume::zeros(cd, cout);
        let k = geo.kernel as isize;
        for o0 in 0..cd[0] {
            for o1 in 0..cd[1] {
                for o2 in 0..cd[2] {
                    let oi = ((o0 * cd[1] + o1) * cd[2] + o2) * cout;
                    out.data[oi..oi + cout].copy_from_slice(b);
                    for a0 in 0..k {
                        for a1 in 0..k {
                            for a2 in 0..k {
                                let y = [
                                    (o0 * geo.stride) as isize - geo.pad as isize + a0,
                                    (o1 * geo.stride) as isize - geo.pad as isize + a1,
                                    (o2 * geo.stride) as isize - geo.pad as isize + a2,
                                ];
                                if (0..3).any(|a| y[a] < 0 || y[a] >= x.dims[a] as isize) {
                                    continue;
                                }
                                let tap = ((a0 * k + a1) * k + a2) as usize;
                                let yi = ((y[0] as usize * x.dims[1] + y[1] as usize) * x.dims[2] + y[2] as usize)
                                    * x.channels;
                                for i in 0..x.channels {
                                    for o in 0..cout {
                                        out.data[oi + o] += x.data[yi + i] * w[(tap * x.channels + i) * cout + o];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_naive_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for &(k, s) in &[(4usize, 2usize), (3, 1), (1, 1)] {
            let geo = ConvGeometry::same(k, s).unwrap();
            let x = random_volume(&mut rng, [4, 2, 6], 3, 0.3);
            let w: Vec<f64> = (0..geo.taps() * 3 * 5).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let b: Vec<f64> = (0..5).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let fast = conv3d(&x, &w, &b, geo).unwrap();
            let slow = naive_conv(&x, &w, &b, geo);
            assert_eq!(fast.dims, slow.dims);
            for (a, b) in fast.data.iter().zip(&slow.data) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn transposed_conv_is_adjoint_of_conv() {
        // <conv(x), y> == <x, convT(y)> with shared weights and zero bias
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let geo = ConvGeometry::same(4, 2).unwrap();
        let x = random_volume(&mut rng, [4, 4, 2], 3, 0.0);
        let y = random_volume(&mut rng, [2, 2, 1], 5, 0.0);
        let w: Vec<f64> = (0..geo.taps() * 3 * 5).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let cx = conv3d(&x, &w, &[0.0; 5], geo).unwrap();
        let wt = transpose_taps(&w, geo.taps(), 3, 5);
        let ty = conv_transpose3d(&y, &wt, &[0.0; 3], geo).unwrap();
        let lhs: f64 = cx.data.iter().zip(&y.data).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.data.iter().zip(&ty.data).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10, "{lhs} {rhs}");
    }

    #[test]
    fn shape_errors() {
        let geo = ConvGeometry::same(4, 2).unwrap();
        let x = Volume::zeros([3, 2, 2], 1);
        assert!(conv3d(&x, &vec![0.0; 64], &[0.0], geo).is_err());
        let x = Volume::zeros([2, 2, 2], 1);
        assert!(conv3d(&x, &vec![0.0; 63], &[0.0], geo).is_err());
        assert!(ConvGeometry::same(3, 2).is_err());
        assert!(concat_channels(&Volume::zeros([1, 1, 1], 1), &Volume::zeros([1, 1, 2], 1)).is_err());
    }

    #[test]
    fn normalize_kills_radial_gradient() {
        // d/dv |normalize(v)|^2 = 2 J^T y = 0
        let v = Volume::new([1, 1, 1], 4, vec![0.3, -1.2, 0.7, 2.0]).unwrap();
        let y = l2_normalize(&v);
        let g = Volume::new([1, 1, 1], 4, y.data.iter().map(|a| 2.0 * a).collect()).unwrap();
        let gv = l2_normalize_backward(&v, &g);
        assert!(gv.data.iter().all(|x| x.abs() < 1e-12));
        let z = l2_normalize(&Volume::zeros([1, 1, 1], 3));
        assert!(z.data.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn split_inverts_concat() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random_volume(&mut rng, [2, 1, 3], 2, 0.0);
        let b = random_volume(&mut rng, [2, 1, 3], 3, 0.0);
        let c = concat_channels(&a, &b).unwrap();
        let (a2, b2) = split_channels(&c, 2);
        assert_eq!(a, a2);
        assert_eq!(b, b2);
    }
}
