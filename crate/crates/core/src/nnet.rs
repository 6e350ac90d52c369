//! From-scratch convolutional building blocks and the two encoder-decoder
//! networks that generate the segmentation map and the displacement field in
//! deep-image-prior mode.
//!
//! Every layer carries an exact backward pass; nothing here is approximated,
//! so whole-network gradients check out against finite differences. A batch
//! is a list of per-slice tensors; batch normalization couples the slices of
//! a stack, everything else is elementwise or per-slice.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::image::Image2D;

/// Channel-major activation tensor for one slice.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorMap {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl TensorMap {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    /// Stack single-channel images into one tensor.
    pub fn from_planes(planes: &[&Image2D]) -> Result<Self> {
        if planes.is_empty() {
            return Err(Error::invalid("need at least one plane"));
        }
        let (w, h) = (planes[0].width(), planes[0].height());
        let mut data = Vec::with_capacity(planes.len() * w * h);
        for p in planes {
            if p.width() != w || p.height() != h {
                return Err(Error::DimensionMismatch {
                    expected_w: w,
                    expected_h: h,
                    got_w: p.width(),
                    got_h: p.height(),
                });
            }
            data.extend_from_slice(p.as_slice());
        }
        Ok(Self {
            channels: planes.len(),
            height: h,
            width: w,
            data,
        })
    }

    /// Extract one channel as an image.
    pub fn plane(&self, c: usize) -> Image2D {
        let n = self.height * self.width;
        Image2D::from_vec(
            self.width,
            self.height,
            self.data[c * n..(c + 1) * n].to_vec(),
        )
        .expect("plane dims are consistent")
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OutActivation {
    Sigmoid,
    ScaledTanh,
}

/// Architecture description of one encoder-decoder network.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UNetSpec {
    pub in_channels: usize,
    pub base_filters: usize,
    /// Number of downsampling levels.
    pub depth: usize,
    pub dropout_rate: f64,
    pub out_channels: usize,
    pub out_activation: OutActivation,
    /// Output bound (pixels) for the scaled-tanh head.
    pub max_disp: f64,
}

impl UNetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.depth < 1 || self.base_filters < 1 {
            return Err(Error::invalid("depth and base_filters must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::invalid("dropout rate must be in [0, 1)"));
        }
        Ok(())
    }
}

/// Shared network hyperparameters; `build_pipeline` turns one of these into
/// the two concrete specs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NetConfig {
    pub base_filters: usize,
    pub depth: usize,
    pub dropout_rate: f64,
    pub max_disp: f64,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            base_filters: 32,
            depth: 3,
            dropout_rate: 0.1,
            max_disp: 10.0,
        }
    }
}

impl NetConfig {
    /// Reduced desk-scale setting for 64x64 instances. The displacement bound
    /// shrinks with the scale; an unconstrained bound lets the field drift on
    /// featureless regions.
    pub fn desk() -> Self {
        Self {
            base_filters: 8,
            depth: 2,
            max_disp: 5.0,
            ..Default::default()
        }
    }
}

/// Segmentation network: template, reference and a fixed noise channel in,
/// one sigmoid probability map out. Registration network: segmentation map,
/// warped template, reference and noise in, two bounded displacement
/// channels out.
pub fn build_pipeline(cfg: &NetConfig) -> (UNetSpec, UNetSpec) {
    let seg = UNetSpec {
        in_channels: 3,
        base_filters: cfg.base_filters,
        depth: cfg.depth,
        dropout_rate: cfg.dropout_rate,
        out_channels: 1,
        out_activation: OutActivation::Sigmoid,
        max_disp: cfg.max_disp,
    };
    let reg = UNetSpec {
        in_channels: 4,
        out_channels: 2,
        out_activation: OutActivation::ScaledTanh,
        ..seg
    };
    (seg, reg)
}

// ---------------------------------------------------------------------------
// Convolution
// ---------------------------------------------------------------------------

fn conv_out_dim(n: usize, ksize: usize, stride: usize) -> usize {
    let pad = ksize / 2;
    (n + 2 * pad - ksize) / stride + 1
}

/// Stride-`s`, zero-padded cross-correlation. Weights are laid out
/// `[out_c][in_c][ky][kx]`.
pub fn conv_forward(
    x: &TensorMap,
    weight: &[f64],
    bias: &[f64],
    out_c: usize,
    ksize: usize,
    stride: usize,
) -> TensorMap {
    let in_c = x.channels;
    let pad = ksize as i64 / 2;
    let oh = conv_out_dim(x.height, ksize, stride);
    let ow = conv_out_dim(x.width, ksize, stride);
    let mut out = TensorMap::zeros(out_c, oh, ow);
    let plane = x.height * x.width;
    let oplane = oh * ow;
    for oc in 0..out_c {
        out.data[oc * oplane..(oc + 1) * oplane].fill(bias[oc]);
        for ic in 0..in_c {
            for ky in 0..ksize {
                for kx in 0..ksize {
                    let wv =
                        weight[((oc * in_c + ic) * ksize + ky) * ksize + kx];
                    if wv == 0.0 {
                        continue;
                    }
                    for oy in 0..oh {
                        let iy = (oy * stride) as i64 + ky as i64 - pad;
                        if iy < 0 || iy >= x.height as i64 {
                            continue;
                        }
                        let in_row = ic * plane + iy as usize * x.width;
                        let out_row = oc * oplane + oy * ow;
                        for ox in 0..ow {
                            let ix = (ox * stride) as i64 + kx as i64 - pad;
                            if ix < 0 || ix >= x.width as i64 {
                                continue;
                            }
                            out.data[out_row + ox] += wv * x.data[in_row + ix as usize];
                        }
                    }
                }
            }
        }
    }
    out
}

/// Exact gradients of [`conv_forward`]: input gradient plus accumulated
/// weight and bias gradients (added into `d_weight` / `d_bias`).
pub fn conv_backward(
    x: &TensorMap,
    weight: &[f64],
    out_c: usize,
    ksize: usize,
    stride: usize,
    dy: &TensorMap,
    d_weight: &mut [f64],
    d_bias: &mut [f64],
) -> TensorMap {
    let in_c = x.channels;
    let pad = ksize as i64 / 2;
    let (oh, ow) = (dy.height, dy.width);
    let plane = x.height * x.width;
    let oplane = oh * ow;
    let mut dx = TensorMap::zeros(in_c, x.height, x.width);
    for oc in 0..out_c {
        for v in &dy.data[oc * oplane..(oc + 1) * oplane] {
            d_bias[oc] += v;
        }
        for ic in 0..in_c {
            for ky in 0..ksize {
                for kx in 0..ksize {
                    let widx = ((oc * in_c + ic) * ksize + ky) * ksize + kx;
                    let wv = weight[widx];
                    let mut wgrad = 0.0;
                    for oy in 0..oh {
                        let iy = (oy * stride) as i64 + ky as i64 - pad;
                        if iy < 0 || iy >= x.height as i64 {
                            continue;
                        }
                        let in_row = ic * plane + iy as usize * x.width;
                        let out_row = oc * oplane + oy * ow;
                        for ox in 0..ow {
                            let ix = (ox * stride) as i64 + kx as i64 - pad;
                            if ix < 0 || ix >= x.width as i64 {
                                continue;
                            }
                            let g = dy.data[out_row + ox];
                            wgrad += g * x.data[in_row + ix as usize];
                            dx.data[in_row + ix as usize] += wv * g;
                        }
                    }
                    d_weight[widx] += wgrad;
                }
            }
        }
    }
    dx
}

// ---------------------------------------------------------------------------
// Elementwise and normalization layers
// ---------------------------------------------------------------------------

/// Per-channel parametric ReLU.
pub fn prelu_forward(x: &TensorMap, slope: &[f64]) -> TensorMap {
    let plane = x.height * x.width;
    let mut out = x.clone();
    for c in 0..x.channels {
        let a = slope[c];
        for v in &mut out.data[c * plane..(c + 1) * plane] {
            if *v < 0.0 {
                *v *= a;
            }
        }
    }
    out
}

pub fn prelu_backward(
    x: &TensorMap,
    slope: &[f64],
    dy: &TensorMap,
    d_slope: &mut [f64],
) -> TensorMap {
    let plane = x.height * x.width;
    let mut dx = TensorMap::zeros(x.channels, x.height, x.width);
    for c in 0..x.channels {
        let a = slope[c];
        for i in c * plane..(c + 1) * plane {
            if x.data[i] >= 0.0 {
                dx.data[i] = dy.data[i];
            } else {
                dx.data[i] = dy.data[i] * a;
                d_slope[c] += dy.data[i] * x.data[i];
            }
        }
    }
    dx
}

pub const BN_EPS: f64 = 1e-5;

pub struct BatchNormCache {
    pub xhat: Vec<TensorMap>,
    pub inv_std: Vec<f64>,
}

/// Batch normalization with statistics over the whole slice batch per
/// channel, eps-stabilized so single-pixel channels stay finite.
pub fn batchnorm_forward(
    batch: &[TensorMap],
    gamma: &[f64],
    beta: &[f64],
) -> (Vec<TensorMap>, BatchNormCache) {
    let channels = batch[0].channels;
    let plane = batch[0].height * batch[0].width;
    let n = (batch.len() * plane) as f64;
    let mut out = batch.to_vec();
    let mut xhat = batch.to_vec();
    let mut inv_std = vec![0.0; channels];
    for c in 0..channels {
        let mut mean = 0.0;
        for t in batch {
            for &v in &t.data[c * plane..(c + 1) * plane] {
                mean += v;
            }
        }
        mean /= n;
        let mut var = 0.0;
        for t in batch {
            for &v in &t.data[c * plane..(c + 1) * plane] {
                var += (v - mean) * (v - mean);
            }
        }
        var /= n;
        let istd = 1.0 / (var + BN_EPS).sqrt();
        inv_std[c] = istd;
        for (b, t) in batch.iter().enumerate() {
            for i in c * plane..(c + 1) * plane {
                let h = (t.data[i] - mean) * istd;
                xhat[b].data[i] = h;
                out[b].data[i] = gamma[c] * h + beta[c];
            }
        }
    }
    (out, BatchNormCache { xhat, inv_std })
}

pub fn batchnorm_backward(
    cache: &BatchNormCache,
    gamma: &[f64],
    dy: &[TensorMap],
    d_gamma: &mut [f64],
    d_beta: &mut [f64],
) -> Vec<TensorMap> {
    let channels = dy[0].channels;
    let plane = dy[0].height * dy[0].width;
    let n = (dy.len() * plane) as f64;
    let mut dx = dy.to_vec();
    for c in 0..channels {
        let mut sum_dy = 0.0;
        let mut sum_dy_xhat = 0.0;
        for (b, t) in dy.iter().enumerate() {
            for i in c * plane..(c + 1) * plane {
                sum_dy += t.data[i];
                sum_dy_xhat += t.data[i] * cache.xhat[b].data[i];
            }
        }
        d_gamma[c] += sum_dy_xhat;
        d_beta[c] += sum_dy;
        let scale = gamma[c] * cache.inv_std[c];
        for (b, t) in dy.iter().enumerate() {
            for i in c * plane..(c + 1) * plane {
                dx[b].data[i] = scale
                    * (t.data[i]
                        - sum_dy / n
                        - cache.xhat[b].data[i] * sum_dy_xhat / n);
            }
        }
    }
    dx
}

/// Inverted dropout masks (0 or 1/(1-rate)) for one batch, or `None` when
/// inactive (eval mode or zero rate).
pub fn dropout_masks(
    batch: &[TensorMap],
    rate: f64,
    train: bool,
    seed: u64,
) -> Option<Vec<TensorMap>> {
    if !train || rate == 0.0 {
        return None;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let keep = 1.0 / (1.0 - rate);
    Some(
        batch
            .iter()
            .map(|t| {
                let mut m = TensorMap::zeros(t.channels, t.height, t.width);
                for v in &mut m.data {
                    *v = if rng.random_range(0.0..1.0) < rate {
                        0.0
                    } else {
                        keep
                    };
                }
                m
            })
            .collect(),
    )
}

pub fn apply_mask(batch: &mut [TensorMap], masks: &Option<Vec<TensorMap>>) {
    if let Some(masks) = masks {
        for (t, m) in batch.iter_mut().zip(masks) {
            for (v, &s) in t.data.iter_mut().zip(&m.data) {
                *v *= s;
            }
        }
    }
}

/// Nearest-neighbor 2x upsampling.
pub fn upsample_forward(x: &TensorMap) -> TensorMap {
    let mut out = TensorMap::zeros(x.channels, x.height * 2, x.width * 2);
    let plane = x.height * x.width;
    let oplane = 4 * plane;
    for c in 0..x.channels {
        for y in 0..x.height {
            for xx in 0..x.width {
                let v = x.data[c * plane + y * x.width + xx];
                let base = c * oplane + 2 * y * 2 * x.width + 2 * xx;
                out.data[base] = v;
                out.data[base + 1] = v;
                out.data[base + 2 * x.width] = v;
                out.data[base + 2 * x.width + 1] = v;
            }
        }
    }
    out
}

pub fn upsample_backward(dy: &TensorMap) -> TensorMap {
    let (h, w) = (dy.height / 2, dy.width / 2);
    let mut dx = TensorMap::zeros(dy.channels, h, w);
    let plane = h * w;
    let oplane = dy.height * dy.width;
    for c in 0..dy.channels {
        for y in 0..h {
            for xx in 0..w {
                let base = c * oplane + 2 * y * dy.width + 2 * xx;
                dx.data[c * plane + y * w + xx] = dy.data[base]
                    + dy.data[base + 1]
                    + dy.data[base + dy.width]
                    + dy.data[base + dy.width + 1];
            }
        }
    }
    dx
}

/// Channel concatenation, up-path first then skip.
pub fn skip_concat(up: &TensorMap, skip: &TensorMap) -> TensorMap {
    debug_assert_eq!(up.height, skip.height);
    debug_assert_eq!(up.width, skip.width);
    let mut data = Vec::with_capacity(up.len() + skip.len());
    data.extend_from_slice(&up.data);
    data.extend_from_slice(&skip.data);
    TensorMap {
        channels: up.channels + skip.channels,
        height: up.height,
        width: up.width,
        data,
    }
}

fn concat_split(dy: &TensorMap, up_channels: usize) -> (TensorMap, TensorMap) {
    let plane = dy.height * dy.width;
    let cut = up_channels * plane;
    (
        TensorMap {
            channels: up_channels,
            height: dy.height,
            width: dy.width,
            data: dy.data[..cut].to_vec(),
        },
        TensorMap {
            channels: dy.channels - up_channels,
            height: dy.height,
            width: dy.width,
            data: dy.data[cut..].to_vec(),
        },
    )
}

// ---------------------------------------------------------------------------
// Conv unit: conv -> PReLU -> batchnorm -> dropout
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
struct ConvUnit {
    in_c: usize,
    out_c: usize,
    ksize: usize,
    stride: usize,
    weight: Vec<f64>,
    bias: Vec<f64>,
    slope: Vec<f64>,
    gamma: Vec<f64>,
    beta: Vec<f64>,
}

impl ConvUnit {
    fn init(in_c: usize, out_c: usize, ksize: usize, stride: usize, rng: &mut ChaCha8Rng) -> Self {
        let fan_in = (in_c * ksize * ksize) as f64;
        let std = (2.0 / fan_in).sqrt();
        let weight = (0..out_c * in_c * ksize * ksize)
            .map(|_| {
                // Box-Muller normal draw.
                let u1: f64 = rng.random_range(f64::MIN_POSITIVE..1.0);
                let u2: f64 = rng.random_range(0.0..1.0);
                std * (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
            })
            .collect();
        Self {
            in_c,
            out_c,
            ksize,
            stride,
            weight,
            bias: vec![0.0; out_c],
            slope: vec![0.25; out_c],
            gamma: vec![1.0; out_c],
            beta: vec![0.0; out_c],
        }
    }

    fn param_len(&self) -> usize {
        self.weight.len() + self.bias.len() + self.slope.len() + self.gamma.len() + self.beta.len()
    }
}

struct UnitCache {
    x: Vec<TensorMap>,
    z: Vec<TensorMap>,
    bn: BatchNormCache,
    mask: Option<Vec<TensorMap>>,
}

/// Gradients for one unit, same layout as its parameters.
#[derive(Debug, Clone)]
struct UnitGrads {
    weight: Vec<f64>,
    bias: Vec<f64>,
    slope: Vec<f64>,
    gamma: Vec<f64>,
    beta: Vec<f64>,
}

impl UnitGrads {
    fn zeros_like(u: &ConvUnit) -> Self {
        Self {
            weight: vec![0.0; u.weight.len()],
            bias: vec![0.0; u.bias.len()],
            slope: vec![0.0; u.slope.len()],
            gamma: vec![0.0; u.gamma.len()],
            beta: vec![0.0; u.beta.len()],
        }
    }
}

fn unit_forward(
    unit: &ConvUnit,
    batch: &[TensorMap],
    dropout_rate: f64,
    train: bool,
    seed: u64,
) -> (Vec<TensorMap>, UnitCache) {
    let z: Vec<TensorMap> = batch
        .iter()
        .map(|x| conv_forward(x, &unit.weight, &unit.bias, unit.out_c, unit.ksize, unit.stride))
        .collect();
    let p: Vec<TensorMap> = z.iter().map(|t| prelu_forward(t, &unit.slope)).collect();
    let (mut out, bn) = batchnorm_forward(&p, &unit.gamma, &unit.beta);
    let mask = dropout_masks(&out, dropout_rate, train, seed);
    apply_mask(&mut out, &mask);
    (
        out,
        UnitCache {
            x: batch.to_vec(),
            z,
            bn,
            mask,
        },
    )
}

fn unit_backward(
    unit: &ConvUnit,
    cache: &UnitCache,
    dy: &[TensorMap],
    grads: &mut UnitGrads,
) -> Vec<TensorMap> {
    let mut dy = dy.to_vec();
    apply_mask(&mut dy, &cache.mask);
    let dp = batchnorm_backward(&cache.bn, &unit.gamma, &dy, &mut grads.gamma, &mut grads.beta);
    let mut dx = Vec::with_capacity(dy.len());
    for (b, dpb) in dp.iter().enumerate() {
        let dz = prelu_backward(&cache.z[b], &unit.slope, dpb, &mut grads.slope);
        dx.push(conv_backward(
            &cache.x[b],
            &unit.weight,
            unit.out_c,
            unit.ksize,
            unit.stride,
            &dz,
            &mut grads.weight,
            &mut grads.bias,
        ));
    }
    dx
}

// ---------------------------------------------------------------------------
// The encoder-decoder network
// ---------------------------------------------------------------------------

/// One network: stem, `depth` downsampling levels, mirrored decoder with skip
/// concatenation, and a 1x1 output head.
#[derive(Debug, Clone)]
pub struct UNet {
    pub spec: UNetSpec,
    units: Vec<ConvUnit>,
    head_weight: Vec<f64>,
    head_bias: Vec<f64>,
}

/// Everything the backward pass needs from one forward evaluation.
pub struct UNetCache {
    input_padded: Vec<TensorMap>,
    unit_caches: Vec<UnitCache>,
    skips: Vec<Vec<TensorMap>>,
    head_in: Vec<TensorMap>,
    pre_act: Vec<TensorMap>,
    orig_h: usize,
    orig_w: usize,
}

/// Flat gradient vector matching [`UNet::flat_params`] order.
pub struct UNetGrads {
    units: Vec<UnitGrads>,
    head_weight: Vec<f64>,
    head_bias: Vec<f64>,
}

fn mix_seed(seed: u64, salt: u64) -> u64 {
    let mut z = seed ^ salt.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

impl UNet {
    /// Deterministic He-style initialization from a seed.
    pub fn init(spec: &UNetSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 0xC0FFEE));
        let f = spec.base_filters;
        let mut units = Vec::new();
        // Stem.
        units.push(ConvUnit::init(spec.in_channels, f, 3, 1, &mut rng));
        units.push(ConvUnit::init(f, f, 3, 1, &mut rng));
        // Encoder: stride-2 conv then one conv per level.
        for l in 0..spec.depth {
            let c_in = f << l;
            let c_out = f << (l + 1);
            units.push(ConvUnit::init(c_in, c_out, 3, 2, &mut rng));
            units.push(ConvUnit::init(c_out, c_out, 3, 1, &mut rng));
        }
        // Decoder: post-upsample conv then post-concat conv per level.
        for l in (0..spec.depth).rev() {
            let c_hi = f << (l + 1);
            let c_lo = f << l;
            units.push(ConvUnit::init(c_hi, c_lo, 3, 1, &mut rng));
            units.push(ConvUnit::init(2 * c_lo, c_lo, 3, 1, &mut rng));
        }
        let fan_in = f as f64;
        let std = (2.0 / fan_in).sqrt();
        let head_weight = (0..spec.out_channels * f)
            .map(|_| {
                let u1: f64 = rng.random_range(f64::MIN_POSITIVE..1.0);
                let u2: f64 = rng.random_range(0.0..1.0);
                std * (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
            })
            .collect();
        Ok(Self {
            spec: *spec,
            units,
            head_weight,
            head_bias: vec![0.0; spec.out_channels],
        })
    }

    pub fn num_params(&self) -> usize {
        self.units.iter().map(|u| u.param_len()).sum::<usize>()
            + self.head_weight.len()
            + self.head_bias.len()
    }

    /// Parameter blocks as `(name, length)` pairs, in flat order.
    pub fn param_manifest(&self) -> Vec<(String, usize)> {
        let mut m = Vec::new();
        for (i, u) in self.units.iter().enumerate() {
            m.push((format!("unit{i}.weight"), u.weight.len()));
            m.push((format!("unit{i}.bias"), u.bias.len()));
            m.push((format!("unit{i}.slope"), u.slope.len()));
            m.push((format!("unit{i}.gamma"), u.gamma.len()));
            m.push((format!("unit{i}.beta"), u.beta.len()));
        }
        m.push(("head.weight".into(), self.head_weight.len()));
        m.push(("head.bias".into(), self.head_bias.len()));
        m
    }

    pub fn flat_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for u in &self.units {
            out.extend_from_slice(&u.weight);
            out.extend_from_slice(&u.bias);
            out.extend_from_slice(&u.slope);
            out.extend_from_slice(&u.gamma);
            out.extend_from_slice(&u.beta);
        }
        out.extend_from_slice(&self.head_weight);
        out.extend_from_slice(&self.head_bias);
        out
    }

    pub fn set_flat_params(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(Error::invalid(format!(
                "expected {} parameters, got {}",
                self.num_params(),
                flat.len()
            )));
        }
        let mut pos = 0;
        let mut take = |dst: &mut [f64], pos: &mut usize| {
            dst.copy_from_slice(&flat[*pos..*pos + dst.len()]);
            *pos += dst.len();
        };
        for u in &mut self.units {
            take(&mut u.weight, &mut pos);
            take(&mut u.bias, &mut pos);
            take(&mut u.slope, &mut pos);
            take(&mut u.gamma, &mut pos);
            take(&mut u.beta, &mut pos);
        }
        take(&mut self.head_weight, &mut pos);
        take(&mut self.head_bias, &mut pos);
        Ok(())
    }

    /// Zero every parameter; the sigmoid head then emits 0.5 and the
    /// scaled-tanh head a zero field.
    pub fn zero_params(&mut self) {
        let n = self.num_params();
        self.set_flat_params(&vec![0.0; n]).expect("length matches");
    }

    fn pad_batch(&self, batch: &[TensorMap]) -> Result<(Vec<TensorMap>, usize, usize)> {
        let mult = 1 << self.spec.depth;
        let (h, w) = (batch[0].height, batch[0].width);
        let ph = h.div_ceil(mult) * mult;
        let pw = w.div_ceil(mult) * mult;
        for t in batch {
            if t.channels != self.spec.in_channels {
                return Err(Error::invalid(format!(
                    "expected {} input channels, got {}",
                    self.spec.in_channels, t.channels
                )));
            }
            if t.height != h || t.width != w {
                return Err(Error::DimensionMismatch {
                    expected_w: w,
                    expected_h: h,
                    got_w: t.width,
                    got_h: t.height,
                });
            }
        }
        if ph == h && pw == w {
            return Ok((batch.to_vec(), h, w));
        }
        let padded = batch
            .iter()
            .map(|t| {
                let mut p = TensorMap::zeros(t.channels, ph, pw);
                for c in 0..t.channels {
                    for y in 0..h {
                        let src = c * h * w + y * w;
                        let dst = c * ph * pw + y * pw;
                        p.data[dst..dst + w].copy_from_slice(&t.data[src..src + w]);
                    }
                }
                p
            })
            .collect();
        Ok((padded, h, w))
    }

    /// Run the network over a slice batch. `train` enables dropout; the seed
    /// fixes the dropout masks so a forward is reproducible bit for bit.
    pub fn forward(
        &self,
        batch: &[TensorMap],
        train: bool,
        seed: u64,
    ) -> Result<(Vec<TensorMap>, UNetCache)> {
        if batch.is_empty() {
            return Err(Error::invalid("empty batch"));
        }
        let (input_padded, orig_h, orig_w) = self.pad_batch(batch)?;
        let rate = self.spec.dropout_rate;
        let mut unit_caches = Vec::with_capacity(self.units.len());
        let mut skips: Vec<Vec<TensorMap>> = Vec::with_capacity(self.spec.depth + 1);

        let mut x = input_padded.clone();
        let mut ui = 0;
        let mut run_unit = |x: &[TensorMap], ui: &mut usize, caches: &mut Vec<UnitCache>| {
            let (y, cache) =
                unit_forward(&self.units[*ui], x, rate, train, mix_seed(seed, *ui as u64));
            caches.push(cache);
            *ui += 1;
            y
        };

        // Stem.
        x = run_unit(&x, &mut ui, &mut unit_caches);
        x = run_unit(&x, &mut ui, &mut unit_caches);
        skips.push(x.clone());
        // Encoder.
        for _ in 0..self.spec.depth {
            x = run_unit(&x, &mut ui, &mut unit_caches);
            x = run_unit(&x, &mut ui, &mut unit_caches);
            skips.push(x.clone());
        }
        // Decoder.
        for l in (0..self.spec.depth).rev() {
            let up: Vec<TensorMap> = x.iter().map(upsample_forward).collect();
            x = run_unit(&up, &mut ui, &mut unit_caches);
            let joined: Vec<TensorMap> = x
                .iter()
                .zip(&skips[l])
                .map(|(u, s)| skip_concat(u, s))
                .collect();
            x = run_unit(&joined, &mut ui, &mut unit_caches);
        }

        // Head: 1x1 conv + activation, then crop back to the input size.
        let head_in = x.clone();
        let pre_act: Vec<TensorMap> = x
            .iter()
            .map(|t| {
                conv_forward(
                    t,
                    &self.head_weight,
                    &self.head_bias,
                    self.spec.out_channels,
                    1,
                    1,
                )
            })
            .collect();
        let mut outputs = Vec::with_capacity(pre_act.len());
        for (b, t) in pre_act.iter().enumerate() {
            let mut o = t.clone();
            match self.spec.out_activation {
                OutActivation::Sigmoid => {
                    for v in &mut o.data {
                        *v = 1.0 / (1.0 + (-*v).exp());
                    }
                }
                OutActivation::ScaledTanh => {
                    for v in &mut o.data {
                        *v = self.spec.max_disp * v.tanh();
                    }
                }
            }
            if !o.is_finite() {
                return Err(Error::NonFinite(format!("network output, slice {b}")));
            }
            outputs.push(crop(&o, orig_h, orig_w));
        }
        for (i, c) in unit_caches.iter().enumerate() {
            if c.z.iter().any(|t| !t.is_finite()) {
                return Err(Error::NonFinite(format!("activation at unit {i}")));
            }
        }
        Ok((
            outputs,
            UNetCache {
                input_padded,
                unit_caches,
                skips,
                head_in,
                pre_act,
                orig_h,
                orig_w,
            },
        ))
    }

    /// Weight gradients for the scalar loss whose per-output derivative is
    /// `d_out`. Mirrors the forward pass in reverse.
    pub fn backward(&self, cache: &UNetCache, d_out: &[TensorMap]) -> Result<UNetGrads> {
        let mut grads = UNetGrads {
            units: self.units.iter().map(UnitGrads::zeros_like).collect(),
            head_weight: vec![0.0; self.head_weight.len()],
            head_bias: vec![0.0; self.head_bias.len()],
        };
        let (ph, pw) = (cache.input_padded[0].height, cache.input_padded[0].width);

        // Activation and head backward, with the crop adjoint (zero pad).
        let mut d_head_in = Vec::with_capacity(d_out.len());
        for (b, dcrop) in d_out.iter().enumerate() {
            let dpad = pad_to(dcrop, ph, pw);
            let mut da = dpad.clone();
            match self.spec.out_activation {
                OutActivation::Sigmoid => {
                    for (i, v) in da.data.iter_mut().enumerate() {
                        let a = cache.pre_act[b].data[i];
                        let s = 1.0 / (1.0 + (-a).exp());
                        *v *= s * (1.0 - s);
                    }
                }
                OutActivation::ScaledTanh => {
                    for (i, v) in da.data.iter_mut().enumerate() {
                        let th = cache.pre_act[b].data[i].tanh();
                        *v *= self.spec.max_disp * (1.0 - th * th);
                    }
                }
            }
            d_head_in.push(conv_backward(
                &cache.head_in[b],
                &self.head_weight,
                self.spec.out_channels,
                1,
                1,
                &da,
                &mut grads.head_weight,
                &mut grads.head_bias,
            ));
        }

        let mut ui = self.units.len();
        let mut dx = d_head_in;
        let mut d_skips: Vec<Option<Vec<TensorMap>>> = vec![None; self.spec.depth + 1];

        // Decoder in reverse.
        for l in 0..self.spec.depth {
            ui -= 1;
            let d_joined = unit_backward(&self.units[ui], &cache.unit_caches[ui], &dx, &mut grads.units[ui]);
            let up_channels = self.units[ui].in_c - self.skip_channels(l);
            let mut d_up = Vec::with_capacity(d_joined.len());
            let mut d_skip = Vec::with_capacity(d_joined.len());
            for dj in &d_joined {
                let (du, ds) = concat_split(dj, up_channels);
                d_up.push(du);
                d_skip.push(ds);
            }
            d_skips[l] = Some(d_skip);
            ui -= 1;
            let d_pre_up =
                unit_backward(&self.units[ui], &cache.unit_caches[ui], &d_up, &mut grads.units[ui]);
            dx = d_pre_up.iter().map(upsample_backward).collect();
        }

        // Encoder in reverse, merging gradients that arrived via skips.
        for l in (0..self.spec.depth).rev() {
            if let Some(ds) = &d_skips[l + 1] {
                for (t, s) in dx.iter_mut().zip(ds) {
                    for (v, &g) in t.data.iter_mut().zip(&s.data) {
                        *v += g;
                    }
                }
            }
            ui -= 1;
            dx = unit_backward(&self.units[ui], &cache.unit_caches[ui], &dx, &mut grads.units[ui]);
            ui -= 1;
            dx = unit_backward(&self.units[ui], &cache.unit_caches[ui], &dx, &mut grads.units[ui]);
        }
        if let Some(ds) = &d_skips[0] {
            for (t, s) in dx.iter_mut().zip(ds) {
                for (v, &g) in t.data.iter_mut().zip(&s.data) {
                    *v += g;
                }
            }
        }
        ui -= 1;
        dx = unit_backward(&self.units[ui], &cache.unit_caches[ui], &dx, &mut grads.units[ui]);
        ui -= 1;
        let _ = unit_backward(&self.units[ui], &cache.unit_caches[ui], &dx, &mut grads.units[ui]);
        debug_assert_eq!(ui, 0);
        Ok(grads)
    }

    fn skip_channels(&self, level: usize) -> usize {
        self.spec.base_filters << level
    }
}

impl UNetGrads {
    pub fn flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for u in &self.units {
            out.extend_from_slice(&u.weight);
            out.extend_from_slice(&u.bias);
            out.extend_from_slice(&u.slope);
            out.extend_from_slice(&u.gamma);
            out.extend_from_slice(&u.beta);
        }
        out.extend_from_slice(&self.head_weight);
        out.extend_from_slice(&self.head_bias);
        out
    }
}

fn crop(t: &TensorMap, h: usize, w: usize) -> TensorMap {
    if t.height == h && t.width == w {
        return t.clone();
    }
    let mut out = TensorMap::zeros(t.channels, h, w);
    for c in 0..t.channels {
        for y in 0..h {
            let src = c * t.height * t.width + y * t.width;
            let dst = c * h * w + y * w;
            out.data[dst..dst + w].copy_from_slice(&t.data[src..src + w]);
        }
    }
    out
}

fn pad_to(t: &TensorMap, h: usize, w: usize) -> TensorMap {
    if t.height == h && t.width == w {
        return t.clone();
    }
    let mut out = TensorMap::zeros(t.channels, h, w);
    for c in 0..t.channels {
        for y in 0..t.height {
            let src = c * t.height * t.width + y * t.width;
            let dst = c * h * w + y * w;
            out.data[dst..dst + t.width].copy_from_slice(&t.data[src..src + t.width]);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn random_tensor(r: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> TensorMap {
        let mut t = TensorMap::zeros(c, h, w);
        for v in &mut t.data {
            *v = r.random_range(-1.0..1.0);
        }
        t
    }

    #[test]
    fn conv_identity_kernel() {
        let mut r = rng(100);
        let x = random_tensor(&mut r, 1, 6, 6);
        let mut w = vec![0.0; 9];
        w[4] = 1.0;
        let y = conv_forward(&x, &w, &[0.0], 1, 3, 1);
        assert_eq!(x.data, y.data);
    }

    #[test]
    fn conv_zero_kernel_broadcasts_bias() {
        let mut r = rng(101);
        let x = random_tensor(&mut r, 2, 5, 5);
        let w = vec![0.0; 2 * 2 * 9];
        let y = conv_forward(&x, &w, &[0.3, -0.7], 2, 3, 1);
        assert!(y.data[..25].iter().all(|&v| v == 0.3));
        assert!(y.data[25..].iter().all(|&v| v == -0.7));
    }

    #[test]
    fn conv_stride2_halves_dims() {
        let x = TensorMap::zeros(1, 8, 8);
        let w = vec![0.1; 9];
        let y = conv_forward(&x, &w, &[0.0], 1, 3, 2);
        assert_eq!((y.height, y.width), (4, 4));
    }

    #[test]
    fn conv_backward_matches_finite_differences() {
        let mut r = rng(102);
        let x = random_tensor(&mut r, 1, 5, 5);
        let w: Vec<f64> = (0..9).map(|_| r.random_range(-0.5..0.5)).collect();
        let b = vec![r.random_range(-0.5..0.5)];
        let g = random_tensor(&mut r, 1, 5, 5);

        let loss = |x: &TensorMap, w: &[f64], b: &[f64]| -> f64 {
            let y = conv_forward(x, w, b, 1, 3, 1);
            y.data.iter().zip(&g.data).map(|(&a, &c)| a * c).sum()
        };

        let mut dw = vec![0.0; 9];
        let mut db = vec![0.0; 1];
        let dx = conv_backward(&x, &w, 1, 3, 1, &g, &mut dw, &mut db);

        let step = 1e-6;
        for i in 0..9 {
            let mut wp = w.clone();
            let mut wm = w.clone();
            wp[i] += step;
            wm[i] -= step;
            let fd = (loss(&x, &wp, &b) - loss(&x, &wm, &b)) / (2.0 * step);
            let denom = fd.abs().max(dw[i].abs()).max(1e-6);
            assert!((fd - dw[i]).abs() / denom < 1e-4, "w[{i}]: {fd} vs {}", dw[i]);
        }
        for i in 0..x.data.len() {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp.data[i] += step;
            xm.data[i] -= step;
            let fd = (loss(&xp, &w, &b) - loss(&xm, &w, &b)) / (2.0 * step);
            let denom = fd.abs().max(dx.data[i].abs()).max(1e-6);
            assert!((fd - dx.data[i]).abs() / denom < 1e-4);
        }
        let mut bp = b.clone();
        let mut bm = b.clone();
        bp[0] += step;
        bm[0] -= step;
        let fd = (loss(&x, &w, &bp) - loss(&x, &w, &bm)) / (2.0 * step);
        assert!((fd - db[0]).abs() / fd.abs().max(1e-6) < 1e-4);
    }

    #[test]
    fn prelu_unit_slope_is_identity() {
        let mut r = rng(103);
        let x = random_tensor(&mut r, 2, 4, 4);
        let y = prelu_forward(&x, &[1.0, 1.0]);
        assert_eq!(x.data, y.data);
    }

    #[test]
    fn prelu_backward_matches_finite_differences() {
        let mut r = rng(104);
        let x = random_tensor(&mut r, 2, 4, 4);
        let slope = vec![0.25, -0.4];
        let g = random_tensor(&mut r, 2, 4, 4);
        let loss = |x: &TensorMap, s: &[f64]| -> f64 {
            prelu_forward(x, s)
                .data
                .iter()
                .zip(&g.data)
                .map(|(&a, &c)| a * c)
                .sum()
        };
        let mut ds = vec![0.0; 2];
        let dx = prelu_backward(&x, &slope, &g, &mut ds);
        let step = 1e-6;
        for i in 0..x.data.len() {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp.data[i] += step;
            xm.data[i] -= step;
            let fd = (loss(&xp, &slope) - loss(&xm, &slope)) / (2.0 * step);
            let denom = fd.abs().max(dx.data[i].abs()).max(1e-6);
            assert!((fd - dx.data[i]).abs() / denom < 1e-4);
        }
        for c in 0..2 {
            let mut sp = slope.clone();
            let mut sm = slope.clone();
            sp[c] += step;
            sm[c] -= step;
            let fd = (loss(&x, &sp) - loss(&x, &sm)) / (2.0 * step);
            let denom = fd.abs().max(ds[c].abs()).max(1e-6);
            assert!((fd - ds[c]).abs() / denom < 1e-4);
        }
    }

    #[test]
    fn batchnorm_standardized_input_passes_through() {
        // Zero-mean unit-variance channel with gamma 1, beta 0.
        let vals = [-1.5, -0.5, 0.5, 1.5];
        let std = (vals.iter().map(|v| v * v).sum::<f64>() / 4.0).sqrt();
        let t = TensorMap {
            channels: 1,
            height: 2,
            width: 2,
            data: vals.iter().map(|v| v / std).collect(),
        };
        let (out, _) = batchnorm_forward(&[t.clone()], &[1.0], &[0.0]);
        for (a, b) in out[0].data.iter().zip(&t.data) {
            assert!((a - b).abs() < 1e-4, "{a} vs {b}");
        }
    }

    #[test]
    fn batchnorm_backward_matches_finite_differences() {
        let mut r = rng(105);
        let batch = vec![
            random_tensor(&mut r, 2, 3, 3),
            random_tensor(&mut r, 2, 3, 3),
        ];
        let gamma = vec![1.2, 0.7];
        let beta = vec![0.1, -0.2];
        let g = vec![
            random_tensor(&mut r, 2, 3, 3),
            random_tensor(&mut r, 2, 3, 3),
        ];
        let loss = |batch: &[TensorMap], gamma: &[f64], beta: &[f64]| -> f64 {
            let (out, _) = batchnorm_forward(batch, gamma, beta);
            out.iter()
                .zip(&g)
                .map(|(o, gg)| {
                    o.data
                        .iter()
                        .zip(&gg.data)
                        .map(|(&a, &c)| a * c)
                        .sum::<f64>()
                })
                .sum()
        };
        let (_, cache) = batchnorm_forward(&batch, &gamma, &beta);
        let mut dg = vec![0.0; 2];
        let mut db = vec![0.0; 2];
        let dx = batchnorm_backward(&cache, &gamma, &g, &mut dg, &mut db);

        let step = 1e-6;
        for bidx in 0..2 {
            for i in 0..batch[bidx].data.len() {
                let mut bp = batch.clone();
                let mut bm = batch.clone();
                bp[bidx].data[i] += step;
                bm[bidx].data[i] -= step;
                let fd = (loss(&bp, &gamma, &beta) - loss(&bm, &gamma, &beta)) / (2.0 * step);
                let an = dx[bidx].data[i];
                let denom = fd.abs().max(an.abs()).max(1e-6);
                assert!((fd - an).abs() / denom < 1e-4, "batch {bidx} idx {i}");
            }
        }
        for c in 0..2 {
            let mut gp = gamma.clone();
            let mut gm = gamma.clone();
            gp[c] += step;
            gm[c] -= step;
            let fd = (loss(&batch, &gp, &beta) - loss(&batch, &gm, &beta)) / (2.0 * step);
            let denom = fd.abs().max(dg[c].abs()).max(1e-6);
            assert!((fd - dg[c]).abs() / denom < 1e-4);
            let mut bp = beta.clone();
            let mut bm = beta.clone();
            bp[c] += step;
            bm[c] -= step;
            let fd = (loss(&batch, &gamma, &bp) - loss(&batch, &gamma, &bm)) / (2.0 * step);
            let denom = fd.abs().max(db[c].abs()).max(1e-6);
            assert!((fd - db[c]).abs() / denom < 1e-4);
        }
    }

    #[test]
    fn dropout_contract() {
        let mut r = rng(106);
        let batch = vec![random_tensor(&mut r, 1, 8, 8)];
        assert!(dropout_masks(&batch, 0.0, true, 1).is_none());
        assert!(dropout_masks(&batch, 0.5, false, 1).is_none());
        let a = dropout_masks(&batch, 0.5, true, 42).unwrap();
        let b = dropout_masks(&batch, 0.5, true, 42).unwrap();
        assert_eq!(a[0].data, b[0].data);
        for &v in &a[0].data {
            assert!(v == 0.0 || v == 2.0);
        }
        let c = dropout_masks(&batch, 0.5, true, 43).unwrap();
        assert_ne!(a[0].data, c[0].data);
    }

    #[test]
    fn upsample_roundtrip_shapes_and_adjoint() {
        let mut r = rng(107);
        let x = random_tensor(&mut r, 2, 3, 4);
        let y = upsample_forward(&x);
        assert_eq!((y.height, y.width), (6, 8));
        // Adjoint pairing <up(x), g> == <x, up^T(g)>.
        let g = random_tensor(&mut r, 2, 6, 8);
        let lhs: f64 = y.data.iter().zip(&g.data).map(|(&a, &b)| a * b).sum();
        let gt = upsample_backward(&g);
        let rhs: f64 = x.data.iter().zip(&gt.data).map(|(&a, &b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn concat_layout_is_up_then_skip() {
        let up = TensorMap {
            channels: 1,
            height: 1,
            width: 2,
            data: vec![1.0, 2.0],
        };
        let skip = TensorMap {
            channels: 2,
            height: 1,
            width: 2,
            data: vec![3.0, 4.0, 5.0, 6.0],
        };
        let j = skip_concat(&up, &skip);
        assert_eq!(j.channels, 3);
        assert_eq!(j.data, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let (du, ds) = concat_split(&j, 1);
        assert_eq!(du.data, up.data);
        assert_eq!(ds.data, skip.data);
    }

    fn tiny_spec(out_activation: OutActivation) -> UNetSpec {
        UNetSpec {
            in_channels: 2,
            base_filters: 4,
            depth: 1,
            dropout_rate: 0.1,
            out_channels: if out_activation == OutActivation::Sigmoid {
                1
            } else {
                2
            },
            out_activation,
            max_disp: 10.0,
        }
    }

    #[test]
    fn zero_weights_give_neutral_outputs() {
        let mut r = rng(108);
        let batch = vec![random_tensor(&mut r, 2, 8, 8)];

        let mut net = UNet::init(&tiny_spec(OutActivation::Sigmoid), 1).unwrap();
        net.zero_params();
        let (out, _) = net.forward(&batch, false, 0).unwrap();
        assert!(out[0].data.iter().all(|&v| v == 0.5));

        let mut net = UNet::init(&tiny_spec(OutActivation::ScaledTanh), 1).unwrap();
        net.zero_params();
        let (out, _) = net.forward(&batch, false, 0).unwrap();
        assert!(out[0].data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn output_ranges_hold() {
        let mut r = rng(109);
        let batch = vec![random_tensor(&mut r, 2, 8, 8)];
        let net = UNet::init(&tiny_spec(OutActivation::Sigmoid), 7).unwrap();
        let (out, _) = net.forward(&batch, true, 3).unwrap();
        assert!(out[0].data.iter().all(|&v| v > 0.0 && v < 1.0));

        let net = UNet::init(&tiny_spec(OutActivation::ScaledTanh), 7).unwrap();
        let (out, _) = net.forward(&batch, true, 3).unwrap();
        assert!(out[0].data.iter().all(|&v| (-10.0..=10.0).contains(&v)));
    }

    #[test]
    fn forward_is_deterministic() {
        let mut r = rng(110);
        let batch = vec![random_tensor(&mut r, 2, 8, 8)];
        let net = UNet::init(&tiny_spec(OutActivation::Sigmoid), 11).unwrap();
        let (a, _) = net.forward(&batch, true, 5).unwrap();
        let (b, _) = net.forward(&batch, true, 5).unwrap();
        assert_eq!(a[0].data, b[0].data);
    }

    #[test]
    fn odd_dimensions_are_padded_and_cropped() {
        let mut r = rng(111);
        let spec = UNetSpec {
            in_channels: 2,
            base_filters: 4,
            depth: 2,
            dropout_rate: 0.0,
            out_channels: 1,
            out_activation: OutActivation::Sigmoid,
            max_disp: 10.0,
        };
        let net = UNet::init(&spec, 3).unwrap();
        let batch = vec![random_tensor(&mut r, 2, 10, 6)];
        let (out, _) = net.forward(&batch, false, 0).unwrap();
        assert_eq!((out[0].height, out[0].width), (10, 6));
    }

    #[test]
    fn network_gradients_match_finite_differences() {
        let mut r = rng(112);
        let batch = vec![random_tensor(&mut r, 2, 8, 8)];
        let g = vec![random_tensor(&mut r, 1, 8, 8)];
        let net = UNet::init(&tiny_spec(OutActivation::Sigmoid), 21).unwrap();

        let loss = |n: &UNet| -> f64 {
            let (out, _) = n.forward(&batch, true, 9).unwrap();
            out[0].data.iter().zip(&g[0].data).map(|(&a, &b)| a * b).sum()
        };

        let (_, cache) = net.forward(&batch, true, 9).unwrap();
        let grads = net.backward(&cache, &g).unwrap().flat();
        let params = net.flat_params();

        // Sample a spread of parameters across all blocks.
        let n_params = params.len();
        let step = 1e-5;
        let mut checked = 0;
        for k in 0..24 {
            let i = (k * 997 + 13) % n_params;
            let mut np = net.clone();
            let mut pp = params.clone();
            pp[i] += step;
            np.set_flat_params(&pp).unwrap();
            let up = loss(&np);
            pp[i] -= 2.0 * step;
            np.set_flat_params(&pp).unwrap();
            let dn = loss(&np);
            let fd = (up - dn) / (2.0 * step);
            let an = grads[i];
            let denom = fd.abs().max(an.abs()).max(1e-5);
            assert!(
                (fd - an).abs() / denom < 1e-3,
                "param {i}: fd {fd} vs analytic {an}"
            );
            checked += 1;
        }
        assert_eq!(checked, 24);
    }

    #[test]
    fn build_pipeline_channel_contract() {
        let (seg, reg) = build_pipeline(&NetConfig::default());
        assert_eq!(seg.in_channels, 3);
        assert_eq!(seg.out_channels, 1);
        assert_eq!(seg.out_activation, OutActivation::Sigmoid);
        assert_eq!(seg.base_filters, 32);
        assert_eq!(reg.in_channels, 4);
        assert_eq!(reg.out_channels, 2);
        assert_eq!(reg.out_activation, OutActivation::ScaledTanh);

        let (seg, _) = build_pipeline(&NetConfig::desk());
        assert_eq!(seg.base_filters, 8);
        assert_eq!(seg.depth, 2);
    }

    #[test]
    fn bottleneck_dims_follow_depth() {
        // Depth 1 on 8x8: the post-downsample feature maps sit at 4x4.
        let x = TensorMap::zeros(4, 8, 8);
        let w = vec![0.01; 4 * 4 * 9];
        let y = conv_forward(&x, &w, &[0.0; 4], 4, 3, 2);
        assert_eq!((y.height, y.width), (4, 4));
    }

    #[test]
    fn flat_param_roundtrip() {
        let net = UNet::init(&tiny_spec(OutActivation::Sigmoid), 5).unwrap();
        let flat = net.flat_params();
        let mut other = UNet::init(&tiny_spec(OutActivation::Sigmoid), 99).unwrap();
        other.set_flat_params(&flat).unwrap();
        assert_eq!(other.flat_params(), flat);
        let manifest = net.param_manifest();
        let total: usize = manifest.iter().map(|(_, n)| n).sum();
        assert_eq!(total, flat.len());
    }
}
