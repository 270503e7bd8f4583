//! The network: two modality-specific stems, a shared 3-D U-Net encoder
//! trunk, the pointwise projection head used by the contrastive loss, a
//! mirrored decoder with skip connections, per-modality reconstruction
//! heads and the segmentation head.
//!
//! Batches are `[N, C, T, H, W]`. T, H and W must be multiples of
//! `2^(depth-1)`; [`pad_series`] reflect-pads a series to that grid.

use std::sync::atomic::{AtomicUsize, Ordering};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, S4Error};
use crate::losses::PixelFeatures;
use crate::nn::{
    concat_channels, join, max_pool2, max_pool2_backward,
    mean_over_time, mean_over_time_backward, split_channels, upsample2, upsample2_backward,
    Conv3d, ConvBlock, ConvBlockCtx, ConvCtx, Module, Param,
};
use crate::sits::{Modality, ModalitySeries};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Channels after the stem; doubled at every encoder level.
    pub base_channels: usize,
    /// Encoder levels, including the full-resolution stem level. Every
    /// level after the first halves T, H and W.
    pub depth: usize,
    pub proj_dim: usize,
    pub classes: usize,
    pub radar_channels: usize,
    pub optical_channels: usize,
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            base_channels: 16,
            depth: 3,
            proj_dim: 32,
            classes: 5,
            radar_channels: Modality::Radar.default_channels(),
            optical_channels: Modality::Optical.default_channels(),
            init_seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("base_channels", self.base_channels),
            ("depth", self.depth),
            ("proj_dim", self.proj_dim),
            ("radar_channels", self.radar_channels),
            ("optical_channels", self.optical_channels),
        ];
        for (name, v) in fields {
            if v == 0 {
                return Err(S4Error::InvalidConfig(format!("model.{name} must be positive")));
            }
        }
        if self.classes < 2 {
            return Err(S4Error::InvalidConfig("model.classes must be >= 2".into()));
        }
        if self.depth > 6 {
            return Err(S4Error::InvalidConfig("model.depth must be <= 6".into()));
        }
        Ok(())
    }

    /// Channel count D of the bottleneck features.
    pub fn feature_dim(&self) -> usize {
        self.level_channels(self.depth - 1)
    }

    fn level_channels(&self, level: usize) -> usize {
        self.base_channels << level
    }

    /// T, H and W of encoder inputs must be multiples of this.
    pub fn pad_multiple(&self) -> usize {
        1 << (self.depth - 1)
    }

    pub fn input_channels(&self, modality: Modality) -> usize {
        match modality {
            Modality::Radar => self.radar_channels,
            Modality::Optical => self.optical_channels,
        }
    }
}

/// The two modality-specific conv blocks in front of the shared trunk.
#[derive(Debug)]
pub struct Stem {
    pub blocks: [ConvBlock; 2],
    forward_calls: AtomicUsize,
}

impl Clone for Stem {
    fn clone(&self) -> Self {
        Self {
            blocks: self.blocks.clone(),
            forward_calls: AtomicUsize::new(self.forward_calls.load(Ordering::Relaxed)),
        }
    }
}

impl Stem {
    fn new(cin: usize, cout: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            blocks: [ConvBlock::new(cin, cout, 3, rng), ConvBlock::new(cout, cout, 3, rng)],
            forward_calls: AtomicUsize::new(0),
        }
    }

    /// Number of forward passes run through this stem since construction
    /// or the last [`S4Net::reset_stem_probes`].
    pub fn forward_calls(&self) -> usize {
        self.forward_calls.load(Ordering::Relaxed)
    }
}

impl Module for Stem {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_params(&join(prefix, &i.to_string()), f);
        }
    }

    fn visit_buffers(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Vec<f32>)) {
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_buffers(&join(prefix, &i.to_string()), f);
        }
    }
}

/// Two pointwise conv → batch norm → leaky-ReLU layers.
#[derive(Debug, Clone)]
pub struct ProjectionHead {
    pub layers: [ConvBlock; 2],
}

impl Module for ProjectionHead {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        for (i, b) in self.layers.iter_mut().enumerate() {
            b.visit_params(&join(prefix, &i.to_string()), f);
        }
    }

    fn visit_buffers(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Vec<f32>)) {
        for (i, b) in self.layers.iter_mut().enumerate() {
            b.visit_buffers(&join(prefix, &i.to_string()), f);
        }
    }
}

/// Encoder outputs for a batch: bottleneck features plus the skip tensors
/// of every level above the bottleneck, and what backward needs.
#[derive(Debug, Clone)]
pub struct Encoded {
    pub modality: Modality,
    /// `[N, D, T', H', W']`
    pub features: Tensor,
    /// `skips[l]` is the level-`l` activation, `l < depth - 1`.
    pub skips: Vec<Tensor>,
    ctx: EncodeCtx,
}

#[derive(Debug, Clone)]
struct EncodeCtx {
    stem: Vec<ConvBlockCtx>,
    /// per trunk level: pooled-input shape, pool argmax, block ctx
    trunk: Vec<(Vec<usize>, Vec<usize>, ConvBlockCtx)>,
}

#[derive(Debug, Clone)]
pub struct ProjectCtx {
    layers: Vec<ConvBlockCtx>,
}

#[derive(Debug, Clone)]
pub struct DecodeCtx {
    /// per decoder level (deepest first): upsampled channel count, block ctx
    levels: Vec<(usize, ConvBlockCtx)>,
}

#[derive(Debug, Clone)]
pub struct ReconCtx {
    decode: DecodeCtx,
    head: ConvCtx,
}

#[derive(Debug, Clone)]
pub struct SegmentCtx {
    decode: DecodeCtx,
    frames: usize,
    head: ConvCtx,
}

/// One sample's features, `[T', D, H', W']`, with the factor relating
/// (T', H', W') to the padded input dims.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub dims: [usize; 4],
    pub data: Vec<f32>,
    pub downsample: usize,
}

impl FeatureMap {
    /// Extracts item `n` of a `[N, D, T', H', W']` batch.
    pub fn from_batch(batch: &Tensor, n: usize, downsample: usize) -> Self {
        let [_, d, t, h, w] = batch.dims5();
        let item = batch.item(n);
        let plane = h * w;
        let mut data = Vec::with_capacity(item.len());
        for ti in 0..t {
            for di in 0..d {
                let start = (di * t + ti) * plane;
                data.extend_from_slice(&item[start..start + plane]);
            }
        }
        Self {
            dims: [t, d, h, w],
            data,
            downsample,
        }
    }

    pub fn positions(&self) -> usize {
        self.dims[0] * self.dims[2] * self.dims[3]
    }

    /// Rows are space-time positions `(t, h, w)` in C order.
    pub fn to_pixels(&self) -> PixelFeatures {
        let [t, d, h, w] = self.dims;
        let plane = h * w;
        let mut data = vec![0.0f64; t * plane * d];
        for ti in 0..t {
            for di in 0..d {
                for s in 0..plane {
                    data[(ti * plane + s) * d + di] = self.data[(ti * d + di) * plane + s] as f64;
                }
            }
        }
        PixelFeatures::new(t * plane, d, data)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Pixel-matrix view of item `n` of a `[N, D, T', H', W']` batch.
pub fn batch_item_pixels(batch: &Tensor, n: usize) -> PixelFeatures {
    let [_, d, t, h, w] = batch.dims5();
    let p = t * h * w;
    let item = batch.item(n);
    let mut data = vec![0.0f64; p * d];
    for di in 0..d {
        for pi in 0..p {
            data[pi * d + di] = item[di * p + pi] as f64;
        }
    }
    PixelFeatures::new(p, d, data)
}

/// Writes a `[P, D]` pixel gradient into item `n` of a batch gradient.
pub fn scatter_pixel_grad(grad: &mut Tensor, n: usize, pixels: &[f64]) {
    let [_, d, t, h, w] = grad.dims5();
    let p = t * h * w;
    let len = d * p;
    let item = &mut grad.data[n * len..(n + 1) * len];
    for di in 0..d {
        for pi in 0..p {
            item[di * p + pi] += pixels[pi * d + di] as f32;
        }
    }
}

#[derive(Debug, Clone)]
pub struct S4Net {
    cfg: ModelConfig,
    pub stem_radar: Stem,
    pub stem_optical: Stem,
    /// Shared by both modalities; `trunk[l-1]` produces level `l`.
    pub trunk: Vec<ConvBlock>,
    pub projection: ProjectionHead,
    /// `decoder[l]` consumes level `l+1` upsampled plus skip `l`.
    pub decoder: Vec<ConvBlock>,
    pub recon_radar: Conv3d,
    pub recon_optical: Conv3d,
    pub seg_head: Conv3d,
}

impl S4Net {
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.init_seed);
        let base = cfg.base_channels;
        let stem_radar = Stem::new(cfg.radar_channels, base, &mut rng);
        let stem_optical = Stem::new(cfg.optical_channels, base, &mut rng);
        let trunk = (1..cfg.depth)
            .map(|l| ConvBlock::new(cfg.level_channels(l - 1), cfg.level_channels(l), 3, &mut rng))
            .collect();
        let d = cfg.feature_dim();
        let projection = ProjectionHead {
            layers: [
                ConvBlock::new(d, d, 1, &mut rng),
                ConvBlock::new(d, cfg.proj_dim, 1, &mut rng),
            ],
        };
        let decoder = (0..cfg.depth - 1)
            .map(|l| {
                let cin = cfg.level_channels(l + 1) + cfg.level_channels(l);
                ConvBlock::new(cin, cfg.level_channels(l), 3, &mut rng)
            })
            .collect();
        let recon_radar = Conv3d::new(base, cfg.radar_channels, 1, &mut rng);
        let recon_optical = Conv3d::new(base, cfg.optical_channels, 1, &mut rng);
        let seg_head = Conv3d::new(base, cfg.classes, 1, &mut rng);
        Ok(Self {
            cfg,
            stem_radar,
            stem_optical,
            trunk,
            projection,
            decoder,
            recon_radar,
            recon_optical,
            seg_head,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn stem(&self, modality: Modality) -> &Stem {
        match modality {
            Modality::Radar => &self.stem_radar,
            Modality::Optical => &self.stem_optical,
        }
    }

    fn stem_mut(&mut self, modality: Modality) -> &mut Stem {
        match modality {
            Modality::Radar => &mut self.stem_radar,
            Modality::Optical => &mut self.stem_optical,
        }
    }

    /// The trunk blocks applied after `modality`'s stem.
    pub fn trunk_for(&self, _modality: Modality) -> &[ConvBlock] {
        &self.trunk
    }

    pub fn reset_stem_probes(&self) {
        self.stem_radar.forward_calls.store(0, Ordering::Relaxed);
        self.stem_optical.forward_calls.store(0, Ordering::Relaxed);
    }

    pub fn recon_head(&self, target: Modality) -> &Conv3d {
        match target {
            Modality::Radar => &self.recon_radar,
            Modality::Optical => &self.recon_optical,
        }
    }

    fn recon_head_mut(&mut self, target: Modality) -> &mut Conv3d {
        match target {
            Modality::Radar => &mut self.recon_radar,
            Modality::Optical => &mut self.recon_optical,
        }
    }

    /// stem → shared trunk with 2×2×2 max pooling between levels.
    pub fn encode(&mut self, x: &Tensor, modality: Modality, train: bool) -> Result<Encoded> {
        let [_, c, t, h, w] = x.dims5();
        let expected = self.cfg.input_channels(modality);
        if c != expected {
            return Err(S4Error::ChannelMismatch { expected, got: c });
        }
        let m = self.cfg.pad_multiple();
        if t % m != 0 || h % m != 0 || w % m != 0 {
            return Err(S4Error::ShapeNotPadded {
                dims: [t, h, w],
                multiple: m,
            });
        }
        let stem = self.stem_mut(modality);
        stem.forward_calls.fetch_add(1, Ordering::Relaxed);
        let (h0, c0) = stem.blocks[0].forward(x, train);
        let (h1, c1) = stem.blocks[1].forward(&h0, train);
        let mut ctx = EncodeCtx {
            stem: vec![c0, c1],
            trunk: Vec::new(),
        };
        let mut skips = Vec::new();
        let mut cur = h1;
        for block in self.trunk.iter_mut() {
            let (pooled, argmax) = max_pool2(&cur);
            let shape = cur.shape.clone();
            skips.push(cur);
            let (out, bctx) = block.forward(&pooled, train);
            ctx.trunk.push((shape, argmax, bctx));
            cur = out;
        }
        Ok(Encoded {
            modality,
            features: cur,
            skips,
            ctx,
        })
    }

    /// Accumulates encoder parameter gradients given the gradients of the
    /// bottleneck features and of each skip tensor.
    pub fn encode_backward(&mut self, enc: &Encoded, grad_features: Tensor, grad_skips: Vec<Option<Tensor>>) {
        let mut g = grad_features;
        let mut grad_skips = grad_skips;
        grad_skips.resize(enc.skips.len(), None);
        for level in (0..self.trunk.len()).rev() {
            let (shape, argmax, bctx) = &enc.ctx.trunk[level];
            let gp = self.trunk[level].backward(bctx, &g);
            g = max_pool2_backward(shape, argmax, &gp);
            if let Some(gs) = grad_skips[level].take() {
                g.add_assign(&gs);
            }
        }
        let stem = self.stem_mut(enc.modality);
        let g = stem.blocks[1].backward(&enc.ctx.stem[1], &g);
        stem.blocks[0].backward(&enc.ctx.stem[0], &g);
    }

    pub fn project(&mut self, features: &Tensor, train: bool) -> Result<(Tensor, ProjectCtx)> {
        let d = self.cfg.feature_dim();
        if features.shape[1] != d {
            return Err(S4Error::ChannelMismatch {
                expected: d,
                got: features.shape[1],
            });
        }
        let (a, c0) = self.projection.layers[0].forward(features, train);
        let (b, c1) = self.projection.layers[1].forward(&a, train);
        Ok((b, ProjectCtx { layers: vec![c0, c1] }))
    }

    pub fn project_backward(&mut self, ctx: &ProjectCtx, grad: &Tensor) -> Tensor {
        let g = self.projection.layers[1].backward(&ctx.layers[1], grad);
        self.projection.layers[0].backward(&ctx.layers[0], &g)
    }

    fn decode(&mut self, enc: &Encoded, train: bool) -> Result<(Tensor, DecodeCtx)> {
        let mut cur = enc.features.clone();
        let mut levels = Vec::new();
        for level in (0..self.decoder.len()).rev() {
            let up = upsample2(&cur);
            let skip = &enc.skips[level];
            if up.shape[2..] != skip.shape[2..] {
                return Err(S4Error::ShapeMismatch(format!(
                    "decoder level {level}: upsampled {:?} vs skip {:?}",
                    up.shape, skip.shape
                )));
            }
            let up_channels = up.shape[1];
            let cat = concat_channels(&up, skip);
            let (out, bctx) = self.decoder[level].forward(&cat, train);
            levels.push((up_channels, bctx));
            cur = out;
        }
        Ok((cur, DecodeCtx { levels }))
    }

    /// Returns the gradients for the bottleneck and for each skip.
    fn decode_backward(&mut self, ctx: &DecodeCtx, grad: Tensor) -> (Tensor, Vec<Option<Tensor>>) {
        let depth = self.decoder.len();
        let mut grad_skips: Vec<Option<Tensor>> = vec![None; depth];
        let mut g = grad;
        for (i, level) in (0..depth).enumerate() {
            // levels were pushed deepest first, so walk them in reverse
            let (up_channels, bctx) = &ctx.levels[depth - 1 - i];
            let gc = self.decoder[level].backward(bctx, &g);
            let (g_up, g_skip) = split_channels(&gc, *up_channels);
            grad_skips[level] = Some(g_skip);
            g = upsample2_backward(&g_up);
        }
        (g, grad_skips)
    }

    /// Decoder followed by the pointwise head for `target`:
    /// `[N, C_target, T, H, W]` at the padded input resolution.
    pub fn reconstruct(&mut self, enc: &Encoded, target: Modality, train: bool) -> Result<(Tensor, ReconCtx)> {
        let (dec, decode) = self.decode(enc, train)?;
        let (out, head) = self.recon_head_mut(target).forward(&dec);
        Ok((out, ReconCtx { decode, head }))
    }

    /// Returns gradients for the encoder outputs the reconstruction used.
    pub fn reconstruct_backward(
        &mut self,
        ctx: &ReconCtx,
        target: Modality,
        grad: &Tensor,
    ) -> (Tensor, Vec<Option<Tensor>>) {
        let g = self.recon_head_mut(target).backward(&ctx.head, grad);
        self.decode_backward(&ctx.decode, g)
    }

    /// Decoder, mean over time, pointwise head: logits `[N, K, 1, H, W]`.
    pub fn segment(&mut self, enc: &Encoded, train: bool) -> Result<(Tensor, SegmentCtx)> {
        let (dec, decode) = self.decode(enc, train)?;
        let frames = dec.shape[2];
        let pooled = mean_over_time(&dec);
        let (logits, head) = self.seg_head.forward(&pooled);
        Ok((logits, SegmentCtx { decode, frames, head }))
    }

    pub fn segment_backward(&mut self, ctx: &SegmentCtx, grad: &Tensor) -> (Tensor, Vec<Option<Tensor>>) {
        let g = self.seg_head.backward(&ctx.head, grad);
        let g = mean_over_time_backward(&g, ctx.frames);
        self.decode_backward(&ctx.decode, g)
    }

    pub fn zero_grad(&mut self) {
        self.visit_params("", &mut |_, p| p.zero_grad());
    }

    pub fn param_count(&mut self) -> usize {
        let mut n = 0;
        self.visit_params("", &mut |_, p| n += p.value.len());
        n
    }

    /// Eval-mode logits `[K, H, W]` for one series, unpadded.
    pub fn segment_series(&mut self, series: &ModalitySeries) -> Result<Vec<f32>> {
        let padded = pad_series(series, self.cfg.pad_multiple());
        let x = Tensor::stack(&[padded]);
        let enc = self.encode(&x, series.modality(), false)?;
        let (logits, _) = self.segment(&enc, false)?;
        let [_, k, _, hp, wp] = logits.dims5();
        let (h, w) = (series.height(), series.width());
        let mut out = Vec::with_capacity(k * h * w);
        for ki in 0..k {
            for hi in 0..h {
                let row = (ki * hp + hi) * wp;
                out.extend_from_slice(&logits.data[row..row + w]);
            }
        }
        Ok(out)
    }

    /// Eval-mode bottleneck features of one series.
    pub fn encode_series(&mut self, series: &ModalitySeries) -> Result<FeatureMap> {
        let padded = pad_series(series, self.cfg.pad_multiple());
        let x = Tensor::stack(&[padded]);
        let enc = self.encode(&x, series.modality(), false)?;
        Ok(FeatureMap::from_batch(&enc.features, 0, self.cfg.pad_multiple()))
    }
}

impl Module for S4Net {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.stem_radar.visit_params(&join(prefix, "stem_radar"), f);
        self.stem_optical.visit_params(&join(prefix, "stem_optical"), f);
        for (i, b) in self.trunk.iter_mut().enumerate() {
            b.visit_params(&join(prefix, &format!("trunk.{i}")), f);
        }
        self.projection.visit_params(&join(prefix, "projection"), f);
        for (i, b) in self.decoder.iter_mut().enumerate() {
            b.visit_params(&join(prefix, &format!("decoder.{i}")), f);
        }
        self.recon_radar.visit_params(&join(prefix, "recon_radar"), f);
        self.recon_optical.visit_params(&join(prefix, "recon_optical"), f);
        self.seg_head.visit_params(&join(prefix, "seg_head"), f);
    }

    fn visit_buffers(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Vec<f32>)) {
        self.stem_radar.visit_buffers(&join(prefix, "stem_radar"), f);
        self.stem_optical.visit_buffers(&join(prefix, "stem_optical"), f);
        for (i, b) in self.trunk.iter_mut().enumerate() {
            b.visit_buffers(&join(prefix, &format!("trunk.{i}")), f);
        }
        self.projection.visit_buffers(&join(prefix, "projection"), f);
        for (i, b) in self.decoder.iter_mut().enumerate() {
            b.visit_buffers(&join(prefix, &format!("decoder.{i}")), f);
        }
    }
}

fn reflect(i: usize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let r = i % period;
    if r < n {
        r
    } else {
        period - r
    }
}

/// Rounds `n` up to a multiple of `m`.
pub fn padded_len(n: usize, m: usize) -> usize {
    n.div_ceil(m) * m
}

/// `[T, C, H, W]` series → `[C, T', H', W']` tensor with T', H', W' rounded
/// up to `multiple` by reflection at the trailing edges.
pub fn pad_series(series: &ModalitySeries, multiple: usize) -> Tensor {
    let [t, c, h, w] = series.dims();
    let (tp, hp, wp) = (padded_len(t, multiple), padded_len(h, multiple), padded_len(w, multiple));
    let src = series.data();
    let mut data = vec![0.0f32; c * tp * hp * wp];
    for ci in 0..c {
        for ti in 0..tp {
            let st = reflect(ti, t);
            for hi in 0..hp {
                let sh = reflect(hi, h);
                let s_row = ((st * c + ci) * h + sh) * w;
                let d_row = ((ci * tp + ti) * hp + hi) * wp;
                for wi in 0..wp {
                    data[d_row + wi] = src[s_row + reflect(wi, w)];
                }
            }
        }
    }
    Tensor::new(vec![c, tp, hp, wp], data)
}

/// Chooses frames `[start, start + len)` of a series, reflecting past the
/// end when the series is shorter than `len`.
pub fn frame_window(series: &ModalitySeries, start: usize, len: usize) -> ModalitySeries {
    let t = series.frames();
    let idx: Vec<usize> = (start..start + len).map(|i| reflect(i, t)).collect();
    let mut data = Vec::with_capacity(len * series.frame(0).len());
    for &i in &idx {
        data.extend_from_slice(series.frame(i));
    }
    // timestamps only need to stay increasing; the window keeps the
    // original spacing where it can
    let ts = series.timestamps();
    let mut times = Vec::with_capacity(len);
    let mut last = i64::MIN;
    for &i in &idx {
        let v = ts[i].max(last.saturating_add(1));
        times.push(v);
        last = v;
    }
    let [_, c, h, w] = series.dims();
    ModalitySeries::new(series.modality(), [len, c, h, w], times, data)
        .expect("window of a valid series is valid")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg() -> ModelConfig {
        ModelConfig {
            base_channels: 4,
            depth: 3,
            proj_dim: 6,
            classes: 5,
            ..ModelConfig::default()
        }
    }

    fn input(n: usize, c: usize, t: usize, hw: usize, seed: u64) -> Tensor {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let len = n * c * t * hw * hw;
        Tensor::new(vec![n, c, t, hw, hw], (0..len).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    #[test]
    fn encode_shapes_follow_downsampling() {
        let mut net = S4Net::new(ModelConfig::default()).unwrap();
        let enc = net.encode(&input(1, 3, 8, 32, 0), Modality::Optical, false).unwrap();
        assert_eq!(enc.features.shape, vec![1, 64, 2, 8, 8]);
        let fm = FeatureMap::from_batch(&enc.features, 0, 4);
        assert_eq!(fm.dims, [2, 64, 8, 8]);
        let enc_r = net.encode(&input(1, 2, 8, 32, 1), Modality::Radar, false).unwrap();
        assert_eq!(enc_r.features.shape, enc.features.shape);
    }

    #[test]
    fn encode_rejects_bad_inputs() {
        let mut net = S4Net::new(small_cfg()).unwrap();
        assert!(matches!(
            net.encode(&input(1, 2, 8, 16, 0), Modality::Optical, false),
            Err(S4Error::ChannelMismatch { expected: 3, got: 2 })
        ));
        assert!(matches!(
            net.encode(&input(1, 3, 6, 16, 0), Modality::Optical, false),
            Err(S4Error::ShapeNotPadded { .. })
        ));
    }

    #[test]
    fn reconstruction_and_segmentation_shapes() {
        let mut net = S4Net::new(small_cfg()).unwrap();
        let enc = net.encode(&input(2, 3, 8, 16, 0), Modality::Optical, true).unwrap();
        let (rec, _) = net.reconstruct(&enc, Modality::Radar, true).unwrap();
        assert_eq!(rec.shape, vec![2, 2, 8, 16, 16]);
        assert!(rec.is_finite());
        let (seg, _) = net.segment(&enc, true).unwrap();
        assert_eq!(seg.shape, vec![2, 5, 1, 16, 16]);
        let enc = net.encode(&input(2, 2, 8, 16, 0), Modality::Radar, true).unwrap();
        let (rec, _) = net.reconstruct(&enc, Modality::Optical, true).unwrap();
        assert_eq!(rec.shape, vec![2, 3, 8, 16, 16]);
    }

    #[test]
    fn zero_projection_head_outputs_zero() {
        let mut net = S4Net::new(small_cfg()).unwrap();
        for layer in net.projection.layers.iter_mut() {
            layer.conv.weight.value.fill(0.0);
            layer.conv.bias.value.fill(0.0);
        }
        let enc = net.encode(&input(1, 3, 4, 8, 0), Modality::Optical, false).unwrap();
        let (p, _) = net.project(&enc.features, false).unwrap();
        assert_eq!(p.shape, vec![1, 6, 1, 2, 2]);
        assert!(p.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn shared_trunk_is_one_object() {
        let net = S4Net::new(small_cfg()).unwrap();
        assert!(std::ptr::eq(
            net.trunk_for(Modality::Radar),
            net.trunk_for(Modality::Optical)
        ));
    }

    #[test]
    fn padding_reflects_trailing_edge() {
        let s = ModalitySeries::new(Modality::Radar, [3, 1, 1, 3], vec![0, 1, 2], (0..9).map(|v| v as f32).collect()).unwrap();
        let p = pad_series(&s, 4);
        assert_eq!(p.shape, vec![1, 4, 4, 4]);
        // frame 3 reflects frame 1; column 3 reflects column 1
        assert_eq!(p.data[(3 * 4) * 4..(3 * 4) * 4 + 4], [3.0, 4.0, 5.0, 4.0]);
        assert_eq!(reflect(5, 1), 0);
        let win = frame_window(&s, 1, 4);
        assert_eq!(win.frames(), 4);
        assert_eq!(win.frame(2), s.frame(1));
        assert!(win.timestamps().windows(2).all(|p| p[1] > p[0]));
    }

    #[test]
    fn pixel_views_round_trip() {
        let x = input(2, 3, 2, 2, 9);
        let px = batch_item_pixels(&x, 1);
        assert_eq!((px.pixels, px.dim), (8, 3));
        let fm = FeatureMap::from_batch(&x, 1, 1);
        assert_eq!(fm.to_pixels(), px);
        let mut g = Tensor::zeros(&x.shape);
        scatter_pixel_grad(&mut g, 1, &px.data);
        assert_eq!(g.item(1), x.item(1));
        assert!(g.item(0).iter().all(|&v| v == 0.0));
    }
}
