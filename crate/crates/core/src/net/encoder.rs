use super::ops::{self, ConvGeometry, Volume};
use super::{NetError, TensorND};
use crate::grid::{GridSpec, VoxelGrid};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderStage {
    pub kernel: usize,
    pub stride: usize,
    pub out_channels: usize,
}

/// Upsampling stage. `skip_source` names the pyramid level concatenated
/// after the stage: `0` is the raw input grid, `k >= 1` the output of
/// encoder stage `k`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecoderStage {
    pub kernel: usize,
    pub stride: usize,
    pub out_channels: usize,
    pub skip_source: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderSpec {
    pub input_channels: usize,
    pub encoder: Vec<EncoderStage>,
    pub decoder: Vec<DecoderStage>,
    pub final_kernel: usize,
    pub out_channels: usize,
    pub l2_normalize_output: bool,
}

impl Default for EncoderSpec {
    fn default() -> Self {
        Self::desk()
    }
}

impl EncoderSpec {
    /// Two stride-2 stages (16, 32 channels), a mirrored decoder, 16-dim
    /// output features at input resolution.
    pub fn desk() -> Self {
        EncoderSpec {
            input_channels: 4,
            encoder: vec![
                EncoderStage { kernel: 4, stride: 2, out_channels: 16 },
                EncoderStage { kernel: 4, stride: 2, out_channels: 32 },
            ],
            decoder: vec![
                DecoderStage { kernel: 4, stride: 2, out_channels: 32, skip_source: Some(1) },
                DecoderStage { kernel: 4, stride: 2, out_channels: 16, skip_source: Some(0) },
            ],
            final_kernel: 1,
            out_channels: 16,
            l2_normalize_output: true,
        }
    }

    /// Full-size network: three stride-2 stages with 64/128/192 channels, two
    /// 256-channel upsampling stages with skips, 64-dim output at half the
    /// input resolution.
    pub fn full() -> Self {
        EncoderSpec {
            input_channels: 4,
            encoder: vec![
                EncoderStage { kernel: 4, stride: 2, out_channels: 64 },
                EncoderStage { kernel: 4, stride: 2, out_channels: 128 },
                EncoderStage { kernel: 4, stride: 2, out_channels: 192 },
            ],
            decoder: vec![
                DecoderStage { kernel: 4, stride: 2, out_channels: 256, skip_source: Some(2) },
                DecoderStage { kernel: 4, stride: 2, out_channels: 256, skip_source: Some(1) },
            ],
            final_kernel: 1,
            out_channels: 64,
            l2_normalize_output: true,
        }
    }

    /// Single down/up stage with 8 channels, used in tests.
    pub fn tiny() -> Self {
        EncoderSpec {
            input_channels: 4,
            encoder: vec![EncoderStage { kernel: 4, stride: 2, out_channels: 8 }],
            decoder: vec![DecoderStage { kernel: 4, stride: 2, out_channels: 8, skip_source: Some(0) }],
            final_kernel: 1,
            out_channels: 8,
            l2_normalize_output: true,
        }
    }

    fn level_scales(&self) -> Vec<usize> {
        let mut scales = vec![1usize];
        for s in &self.encoder {
            scales.push(scales.last().unwrap() * s.stride);
        }
        scales
    }

    /// Total downsampling of the deepest level.
    pub fn total_stride(&self) -> usize {
        *self.level_scales().last().unwrap()
    }

    /// Downsampling factor between input and output maps.
    pub fn output_stride(&self) -> usize {
        let mut scale = self.total_stride();
        for d in &self.decoder {
            scale /= d.stride.max(1);
        }
        scale
    }

    pub fn validate(&self) -> Result<(), NetError> {
        let bad = |m: String| Err(NetError::InvalidSpec(m));
        if self.input_channels == 0 || self.out_channels == 0 {
            return bad("channel counts must be positive".into());
        }
        for (i, s) in self.encoder.iter().enumerate() {
            if s.stride == 0 || s.out_channels == 0 {
                return bad(format!("encoder stage {i} has zero stride or channels"));
            }
            ConvGeometry::same(s.kernel, s.stride)?;
        }
        let scales = self.level_scales();
        let mut scale = self.total_stride();
        for (i, d) in self.decoder.iter().enumerate() {
            if d.stride == 0 || d.out_channels == 0 {
                return bad(format!("decoder stage {i} has zero stride or channels"));
            }
            ConvGeometry::same(d.kernel, d.stride)?;
            if scale % d.stride != 0 {
                return bad(format!("decoder stage {i} upsamples past the input resolution"));
            }
            scale /= d.stride;
            if let Some(src) = d.skip_source {
                if src >= scales.len() {
                    return bad(format!("decoder stage {i} skips from missing level {src}"));
                }
                if scales[src] != scale {
                    return bad(format!(
                        "decoder stage {i} at scale 1/{scale} cannot take level {src} at scale 1/{}",
                        scales[src]
                    ));
                }
            }
        }
        if self.final_kernel == 0 || self.final_kernel % 2 == 0 {
            return bad("final kernel must be odd".into());
        }
        Ok(())
    }

    fn level_channels(&self) -> Vec<usize> {
        let mut c = vec![self.input_channels];
        for s in &self.encoder {
            c.push(s.out_channels);
        }
        c
    }

    /// Shapes of all parameters in declaration order: per stage a weight
    /// `[k, k, k, in, out]` followed by a bias `[out]`.
    pub fn param_shapes(&self) -> Vec<Vec<usize>> {
        let levels = self.level_channels();
        let mut shapes = Vec::new();
        let mut c = self.input_channels;
        for s in &self.encoder {
            shapes.push(vec![s.kernel, s.kernel, s.kernel, c, s.out_channels]);
            shapes.push(vec![s.out_channels]);
            c = s.out_channels;
        }
        for d in &self.decoder {
            shapes.push(vec![d.kernel, d.kernel, d.kernel, c, d.out_channels]);
            shapes.push(vec![d.out_channels]);
            c = d.out_channels + d.skip_source.map_or(0, |s| levels[s]);
        }
        let k = self.final_kernel;
        shapes.push(vec![k, k, k, c, self.out_channels]);
        shapes.push(vec![self.out_channels]);
        shapes
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderParams {
    pub spec: EncoderSpec,
    pub tensors: Vec<TensorND>,
}

/// Intermediate activations kept for the backward pass.
#[derive(Debug, Clone)]
pub struct EncoderCache {
    /// Pyramid levels: the input, then each encoder stage's activation.
    levels: Vec<Volume>,
    enc_pre: Vec<Volume>,
    /// Decoder stage inputs and pre-activations.
    dec_in: Vec<Volume>,
    dec_pre: Vec<Volume>,
    final_in: Volume,
    final_pre: Volume,
}

pub type EncoderGrads = Vec<TensorND>;

impl EncoderParams {
    /// Weights and biases uniform in `±sqrt(1 / fan_in)`.
    pub fn init(spec: EncoderSpec, seed: u64) -> Result<Self, NetError> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shapes = spec.param_shapes();
        let mut tensors = Vec::with_capacity(shapes.len());
        for pair in shapes.chunks(2) {
            let w = &pair[0];
            let fan_in = w[0] * w[1] * w[2] * w[3];
            let bound = (1.0 / fan_in as f64).sqrt();
            for shape in pair {
                let n: usize = shape.iter().product();
                let data = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
                tensors.push(TensorND { shape: shape.clone(), data });
            }
        }
        Ok(EncoderParams { spec, tensors })
    }

    pub fn zeros(spec: EncoderSpec) -> Result<Self, NetError> {
        spec.validate()?;
        let tensors = spec.param_shapes().iter().map(|s| TensorND::zeros(s)).collect();
        Ok(EncoderParams { spec, tensors })
    }

    pub fn validate(&self) -> Result<(), NetError> {
        self.spec.validate()?;
        let shapes = self.spec.param_shapes();
        if shapes.len() != self.tensors.len()
            || shapes
                .iter()
                .zip(&self.tensors)
                .any(|(s, t)| *s != t.shape || t.data.len() != t.shape.iter().product::<usize>())
        {
            return Err(NetError::ShapeMismatch("parameters do not match the encoder spec".into()));
        }
        Ok(())
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    fn geometry(kernel: usize, stride: usize) -> ConvGeometry {
        ConvGeometry::same(kernel, stride).expect("validated spec")
    }

    /// Encodes an input grid into a feature map covering the same cube.
    pub fn forward(&self, input: &VoxelGrid) -> Result<VoxelGrid, NetError> {
        let (out, _) = self.forward_cached(input)?;
        Ok(out)
    }

    pub fn forward_cached(&self, input: &VoxelGrid) -> Result<(VoxelGrid, EncoderCache), NetError> {
        let x = self.input_volume(input)?;
        let (out, cache) = self.forward_volume(x)?;
        let stride = self.spec.output_stride();
        let spec = if stride == 1 { input.spec } else { input.spec.rescaled(1, stride) };
        let grid = VoxelGrid { spec, channels: out.channels, data: out.data };
        Ok((grid, cache))
    }

    fn input_volume(&self, input: &VoxelGrid) -> Result<Volume, NetError> {
        if input.channels != self.spec.input_channels {
            return Err(NetError::ShapeMismatch(format!(
                "encoder expects {} input channels, grid has {}",
                self.spec.input_channels, input.channels
            )));
        }
        let stride = self.spec.total_stride();
        if input.spec.resolution.iter().any(|r| r % stride != 0) {
            return Err(NetError::ShapeMismatch(format!(
                "grid {:?} not divisible by total stride {stride}",
                input.spec.resolution
            )));
        }
        Volume::new(input.spec.resolution, input.channels, input.data.clone())
    }

    pub fn forward_volume(&self, x: Volume) -> Result<(Volume, EncoderCache), NetError> {
        self.validate()?;
        let t = &self.tensors;
        let mut p = 0;
        let mut levels = vec![x];
        let mut enc_pre = Vec::new();
        for s in &self.spec.encoder {
            let pre =
                ops::conv3d(levels.last().unwrap(), &t[p].data, &t[p + 1].data, Self::geometry(s.kernel, s.stride))?;
            p += 2;
            levels.push(ops::leaky_relu(&pre));
            enc_pre.push(pre);
        }
        let mut cur = levels.last().unwrap().clone();
        let mut dec_in = Vec::new();
        let mut dec_pre = Vec::new();
        for d in &self.spec.decoder {
            let pre = ops::conv_transpose3d(&cur, &t[p].data, &t[p + 1].data, Self::geometry(d.kernel, d.stride))?;
            p += 2;
            let act = ops::leaky_relu(&pre);
            dec_in.push(std::mem::replace(&mut cur, act));
            dec_pre.push(pre);
            if let Some(src) = d.skip_source {
                cur = ops::concat_channels(&cur, &levels[src])?;
            }
        }
        let final_pre = ops::conv3d(&cur, &t[p].data, &t[p + 1].data, Self::geometry(self.spec.final_kernel, 1))?;
        let out = if self.spec.l2_normalize_output { ops::l2_normalize(&final_pre) } else { final_pre.clone() };
        Ok((out, EncoderCache { levels, enc_pre, dec_in, dec_pre, final_in: cur, final_pre }))
    }

    /// Reverse-mode gradients of the forward pass for an upstream gradient
    /// on the output map. Returns parameter gradients in declaration order
    /// and, if requested, the gradient with respect to the input grid.
    pub fn backward(
        &self,
        cache: &EncoderCache,
        output_grad: &VoxelGrid,
        want_input_grad: bool,
    ) -> Result<(EncoderGrads, Option<VoxelGrid>), NetError> {
        let g = Volume::new(output_grad.spec.resolution, output_grad.channels, output_grad.data.clone())?;
        let (grads, gx) = self.backward_volume(cache, &g, want_input_grad)?;
        let gx = gx.map(|v| VoxelGrid {
            spec: scaled_input_spec(output_grad.spec, self.spec.output_stride()),
            channels: v.channels,
            data: v.data,
        });
        Ok((grads, gx))
    }

    pub fn backward_volume(
        &self,
        cache: &EncoderCache,
        output_grad: &Volume,
        want_input_grad: bool,
    ) -> Result<(EncoderGrads, Option<Volume>), NetError> {
        if output_grad.dims != cache.final_pre.dims || output_grad.channels != cache.final_pre.channels {
            return Err(NetError::ShapeMismatch(format!(
                "output gradient {:?}x{} does not match output {:?}x{}",
                output_grad.dims, output_grad.channels, cache.final_pre.dims, cache.final_pre.channels
            )));
        }
        let t = &self.tensors;
        let mut grads: Vec<TensorND> = t.iter().map(|x| x.zeros_like()).collect();
        let n_enc = self.spec.encoder.len();
        let n_dec = self.spec.decoder.len();
        let levels_c: Vec<usize> = cache.levels.iter().map(|l| l.channels).collect();
        // gradients flowing into each pyramid level through skips
        let mut level_grads: Vec<Option<Volume>> = vec![None; n_enc + 1];

        let mut g = if self.spec.l2_normalize_output {
            ops::l2_normalize_backward(&cache.final_pre, output_grad)
        } else {
            output_grad.clone()
        };
        let fp = 2 * (n_enc + n_dec);
        let (gw, gb, gx) =
            ops::conv3d_backward(&cache.final_in, &t[fp].data, &g, Self::geometry(self.spec.final_kernel, 1), true)?;
        grads[fp].data = gw;
        grads[fp + 1].data = gb;
        g = gx.expect("requested");

        for (di, d) in self.spec.decoder.iter().enumerate().rev() {
            if let Some(src) = d.skip_source {
                let (ga, gs) = ops::split_channels(&g, d.out_channels);
                accumulate(&mut level_grads[src], gs);
                debug_assert_eq!(levels_c[src], level_grads[src].as_ref().unwrap().channels);
                g = ga;
            }
            let g_pre = ops::leaky_relu_backward(&cache.dec_pre[di], &g);
            let p = 2 * (n_enc + di);
            let (gw, gb, gx) = ops::conv_transpose3d_backward(
                &cache.dec_in[di],
                &t[p].data,
                &g_pre,
                Self::geometry(d.kernel, d.stride),
                true,
            )?;
            grads[p].data = gw;
            grads[p + 1].data = gb;
            g = gx.expect("requested");
        }
        accumulate(&mut level_grads[n_enc], g);

        for (ei, s) in self.spec.encoder.iter().enumerate().rev() {
            let level = ei + 1;
            let g_act = match level_grads[level].take() {
                Some(v) => v,
                None => continue,
            };
            let g_pre = ops::leaky_relu_backward(&cache.enc_pre[ei], &g_act);
            let p = 2 * ei;
            let need_x = ei > 0 || want_input_grad;
            let (gw, gb, gx) = ops::conv3d_backward(
                &cache.levels[ei],
                &t[p].data,
                &g_pre,
                Self::geometry(s.kernel, s.stride),
                need_x,
            )?;
            grads[p].data = gw;
            grads[p + 1].data = gb;
            if let Some(gx) = gx {
                accumulate(&mut level_grads[ei], gx);
            }
        }
        let input_grad = if want_input_grad {
            Some(level_grads[0].take().unwrap_or_else(|| Volume::zeros(cache.levels[0].dims, cache.levels[0].channels)))
        } else {
            None
        };
        Ok((grads, input_grad))
    }

    /// Flat view of every parameter value, in declaration order.
    pub fn flat_len(&self) -> usize {
        self.num_parameters()
    }

    pub fn get_flat(&self, mut i: usize) -> f64 {
        for t in &self.tensors {
            if i < t.len() {
                return t.data[i];
            }
            i -= t.len();
        }
        panic!("parameter index out of range")
    }

    pub fn set_flat(&mut self, mut i: usize, v: f64) {
        for t in &mut self.tensors {
            if i < t.len() {
                t.data[i] = v;
                return;
            }
            i -= t.len();
        }
        panic!("parameter index out of range")
    }
}

fn scaled_input_spec(out: GridSpec, stride: usize) -> GridSpec {
    if stride == 1 {
        out
    } else {
        out.rescaled(stride, 1)
    }
}

fn accumulate(slot: &mut Option<Volume>, g: Volume) {
    match slot {
        Some(acc) => {
            for (a, b) in acc.data.iter_mut().zip(&g.data) {
                *a += b;
            }
        }
        None => *slot = Some(g),
    }
}

/// `slow <- mu * slow + (1 - mu) * fast`, parameter-wise.
pub fn momentum_update(slow: &EncoderParams, fast: &EncoderParams, mu: f64) -> Result<EncoderParams, NetError> {
    if slow.spec != fast.spec {
        return Err(NetError::SpecMismatch("slow and fast encoders differ in spec".into()));
    }
    if !(0.0..1.0).contains(&mu) {
        return Err(NetError::SpecMismatch(format!("momentum {mu} outside [0, 1)")));
    }
    let tensors = slow
        .tensors
        .iter()
        .zip(&fast.tensors)
        .map(|(s, f)| TensorND {
            shape: s.shape.clone(),
            data: s.data.iter().zip(&f.data).map(|(a, b)| mu * a + (1.0 - mu) * b).collect(),
        })
        .collect();
    Ok(EncoderParams { spec: slow.spec.clone(), tensors })
}
