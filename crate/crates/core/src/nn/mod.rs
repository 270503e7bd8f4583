//! Hand-written layers with explicit backward passes. Every forward returns
//! a context object holding what its backward needs, so a layer can be
//! applied several times per step (the shared encoder trunk is).

mod conv;

pub use conv::{Conv3d, ConvCtx};

use rand::Rng;

use crate::tensor::Tensor;

pub const LEAKY_SLOPE: f32 = 0.01;
const BN_EPS: f32 = 1e-5;
const BN_MOMENTUM: f32 = 0.1;

/// A trainable tensor with its gradient accumulator.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub value: Vec<f32>,
    pub grad: Vec<f32>,
}

impl Param {
    pub fn new(value: Vec<f32>) -> Self {
        let grad = vec![0.0; value.len()];
        Self { value, grad }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }
}

/// Visits trainable parameters and persistent buffers by dotted name.
pub trait Module {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param));

    fn visit_buffers(&mut self, _prefix: &str, _f: &mut dyn FnMut(&str, &mut Vec<f32>)) {}
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

impl Module for Conv3d {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        f(&join(prefix, "weight"), &mut self.weight);
        f(&join(prefix, "bias"), &mut self.bias);
    }
}

/// Per-channel batch normalisation over `[N, C, ...]`.
#[derive(Debug, Clone)]
pub struct BatchNorm {
    pub gamma: Param,
    pub beta: Param,
    pub running_mean: Vec<f32>,
    pub running_var: Vec<f32>,
}

#[derive(Debug, Clone)]
pub struct BatchNormCtx {
    xhat: Vec<f32>,
    inv_std: Vec<f32>,
    shape: Vec<usize>,
}

impl BatchNorm {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Param::new(vec![1.0; channels]),
            beta: Param::new(vec![0.0; channels]),
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
        }
    }

    fn channels(&self) -> usize {
        self.gamma.value.len()
    }

    /// In training mode normalises with batch statistics and updates the
    /// running estimates; in eval mode uses the running estimates.
    pub fn forward(&mut self, x: &Tensor, train: bool) -> (Tensor, BatchNormCtx) {
        let n = x.shape[0];
        let c = x.shape[1];
        assert_eq!(c, self.channels());
        let inner: usize = x.shape[2..].iter().product();
        let count = (n * inner) as f64;
        let mut mean = vec![0.0f32; c];
        let mut inv_std = vec![0.0f32; c];
        for ch in 0..c {
            let (m, v) = if train {
                let mut s = 0.0f64;
                for ni in 0..n {
                    let start = (ni * c + ch) * inner;
                    s += x.data[start..start + inner].iter().map(|&v| v as f64).sum::<f64>();
                }
                let m = s / count;
                let mut sq = 0.0f64;
                for ni in 0..n {
                    let start = (ni * c + ch) * inner;
                    sq += x.data[start..start + inner]
                        .iter()
                        .map(|&v| (v as f64 - m).powi(2))
                        .sum::<f64>();
                }
                let var = sq / count;
                let unbiased = if count > 1.0 { sq / (count - 1.0) } else { var };
                self.running_mean[ch] =
                    (1.0 - BN_MOMENTUM) * self.running_mean[ch] + BN_MOMENTUM * m as f32;
                self.running_var[ch] =
                    (1.0 - BN_MOMENTUM) * self.running_var[ch] + BN_MOMENTUM * unbiased as f32;
                (m as f32, var as f32)
            } else {
                (self.running_mean[ch], self.running_var[ch])
            };
            mean[ch] = m;
            inv_std[ch] = 1.0 / (v + BN_EPS).sqrt();
        }
        let mut xhat = vec![0.0f32; x.len()];
        let mut out = Tensor::zeros(&x.shape);
        for ni in 0..n {
            for ch in 0..c {
                let start = (ni * c + ch) * inner;
                let (g, b) = (self.gamma.value[ch], self.beta.value[ch]);
                for i in start..start + inner {
                    let xh = (x.data[i] - mean[ch]) * inv_std[ch];
                    xhat[i] = xh;
                    out.data[i] = g * xh + b;
                }
            }
        }
        (
            out,
            BatchNormCtx {
                xhat,
                inv_std,
                shape: x.shape.clone(),
            },
        )
    }

    /// Backward through training-mode normalisation.
    pub fn backward(&mut self, ctx: &BatchNormCtx, grad_out: &Tensor) -> Tensor {
        let n = ctx.shape[0];
        let c = ctx.shape[1];
        let inner: usize = ctx.shape[2..].iter().product();
        let count = (n * inner) as f32;
        let mut grad_in = Tensor::zeros(&ctx.shape);
        for ch in 0..c {
            let mut sum_dy = 0.0f64;
            let mut sum_dy_xhat = 0.0f64;
            for ni in 0..n {
                let start = (ni * c + ch) * inner;
                for i in start..start + inner {
                    sum_dy += grad_out.data[i] as f64;
                    sum_dy_xhat += (grad_out.data[i] * ctx.xhat[i]) as f64;
                }
            }
            self.gamma.grad[ch] += sum_dy_xhat as f32;
            self.beta.grad[ch] += sum_dy as f32;
            let scale = self.gamma.value[ch] * ctx.inv_std[ch] / count;
            let (sdy, sdyx) = (sum_dy as f32, sum_dy_xhat as f32);
            for ni in 0..n {
                let start = (ni * c + ch) * inner;
                for i in start..start + inner {
                    grad_in.data[i] =
                        scale * (count * grad_out.data[i] - sdy - ctx.xhat[i] * sdyx);
                }
            }
        }
        grad_in
    }
}

impl Module for BatchNorm {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        f(&join(prefix, "gamma"), &mut self.gamma);
        f(&join(prefix, "beta"), &mut self.beta);
    }

    fn visit_buffers(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Vec<f32>)) {
        f(&join(prefix, "running_mean"), &mut self.running_mean);
        f(&join(prefix, "running_var"), &mut self.running_var);
    }
}

pub fn leaky_relu(x: &Tensor) -> Tensor {
    Tensor::new(
        x.shape.clone(),
        x.data
            .iter()
            .map(|&v| if v > 0.0 { v } else { LEAKY_SLOPE * v })
            .collect(),
    )
}

/// `input` is the pre-activation tensor.
pub fn leaky_relu_backward(input: &Tensor, grad_out: &Tensor) -> Tensor {
    Tensor::new(
        input.shape.clone(),
        input
            .data
            .iter()
            .zip(&grad_out.data)
            .map(|(&x, &g)| if x > 0.0 { g } else { LEAKY_SLOPE * g })
            .collect(),
    )
}

/// conv → batch norm → leaky ReLU.
#[derive(Debug, Clone)]
pub struct ConvBlock {
    pub conv: Conv3d,
    pub bn: BatchNorm,
}

#[derive(Debug, Clone)]
pub struct ConvBlockCtx {
    conv: ConvCtx,
    bn: BatchNormCtx,
    pre_act: Tensor,
}

impl ConvBlock {
    pub fn new(cin: usize, cout: usize, kernel: usize, rng: &mut impl Rng) -> Self {
        Self {
            conv: Conv3d::new(cin, cout, kernel, rng),
            bn: BatchNorm::new(cout),
        }
    }

    pub fn forward(&mut self, x: &Tensor, train: bool) -> (Tensor, ConvBlockCtx) {
        let (y, conv) = self.conv.forward(x);
        let (pre_act, bn) = self.bn.forward(&y, train);
        let out = leaky_relu(&pre_act);
        (out, ConvBlockCtx { conv, bn, pre_act })
    }

    pub fn backward(&mut self, ctx: &ConvBlockCtx, grad_out: &Tensor) -> Tensor {
        let g = leaky_relu_backward(&ctx.pre_act, grad_out);
        let g = self.bn.backward(&ctx.bn, &g);
        self.conv.backward(&ctx.conv, &g)
    }
}

impl Module for ConvBlock {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.conv.visit_params(&join(prefix, "conv"), f);
        self.bn.visit_params(&join(prefix, "bn"), f);
    }

    fn visit_buffers(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Vec<f32>)) {
        self.bn.visit_buffers(&join(prefix, "bn"), f);
    }
}

/// 2×2×2 max pooling; returns the pooled tensor and the flat argmax of
/// every output cell. All spatial dims must be even.
pub fn max_pool2(x: &Tensor) -> (Tensor, Vec<usize>) {
    let [n, c, t, h, w] = x.dims5();
    assert!(t % 2 == 0 && h % 2 == 0 && w % 2 == 0, "max_pool2 needs even dims");
    let (to, ho, wo) = (t / 2, h / 2, w / 2);
    let mut out = Tensor::zeros(&[n, c, to, ho, wo]);
    let mut argmax = vec![0usize; out.len()];
    let mut o = 0;
    for nc in 0..n * c {
        let base = nc * t * h * w;
        for ti in 0..to {
            for hi in 0..ho {
                for wi in 0..wo {
                    let mut best = f32::NEG_INFINITY;
                    let mut best_i = 0;
                    for dt in 0..2 {
                        for dh in 0..2 {
                            for dw in 0..2 {
                                let i = base + ((2 * ti + dt) * h + 2 * hi + dh) * w + 2 * wi + dw;
                                if x.data[i] > best {
                                    best = x.data[i];
                                    best_i = i;
                                }
                            }
                        }
                    }
                    out.data[o] = best;
                    argmax[o] = best_i;
                    o += 1;
                }
            }
        }
    }
    (out, argmax)
}

pub fn max_pool2_backward(input_shape: &[usize], argmax: &[usize], grad_out: &Tensor) -> Tensor {
    let mut g = Tensor::zeros(input_shape);
    for (&i, &d) in argmax.iter().zip(&grad_out.data) {
        g.data[i] += d;
    }
    g
}

/// Nearest-neighbour ×2 upsampling in T, H and W.
pub fn upsample2(x: &Tensor) -> Tensor {
    let [n, c, t, h, w] = x.dims5();
    let (t2, h2, w2) = (2 * t, 2 * h, 2 * w);
    let mut out = Tensor::zeros(&[n, c, t2, h2, w2]);
    for nc in 0..n * c {
        let src = nc * t * h * w;
        let dst = nc * t2 * h2 * w2;
        for ti in 0..t2 {
            for hi in 0..h2 {
                let s_row = src + ((ti / 2) * h + hi / 2) * w;
                let d_row = dst + (ti * h2 + hi) * w2;
                for wi in 0..w2 {
                    out.data[d_row + wi] = x.data[s_row + wi / 2];
                }
            }
        }
    }
    out
}

pub fn upsample2_backward(grad_out: &Tensor) -> Tensor {
    let [n, c, t2, h2, w2] = grad_out.dims5();
    let (t, h, w) = (t2 / 2, h2 / 2, w2 / 2);
    let mut g = Tensor::zeros(&[n, c, t, h, w]);
    for nc in 0..n * c {
        let src = nc * t2 * h2 * w2;
        let dst = nc * t * h * w;
        for ti in 0..t2 {
            for hi in 0..h2 {
                let d_row = dst + ((ti / 2) * h + hi / 2) * w;
                let s_row = src + (ti * h2 + hi) * w2;
                for wi in 0..w2 {
                    g.data[d_row + wi / 2] += grad_out.data[s_row + wi];
                }
            }
        }
    }
    g
}

/// Concatenates two `[N, C_i, ...]` tensors along the channel axis.
pub fn concat_channels(a: &Tensor, b: &Tensor) -> Tensor {
    assert_eq!(a.shape[0], b.shape[0]);
    assert_eq!(a.shape[2..], b.shape[2..]);
    let n = a.shape[0];
    let (la, lb) = (a.len() / n, b.len() / n);
    let mut data = Vec::with_capacity(a.len() + b.len());
    for i in 0..n {
        data.extend_from_slice(&a.data[i * la..(i + 1) * la]);
        data.extend_from_slice(&b.data[i * lb..(i + 1) * lb]);
    }
    let mut shape = a.shape.clone();
    shape[1] += b.shape[1];
    Tensor::new(shape, data)
}

/// Splits a channel-concatenated gradient back into the two parts.
pub fn split_channels(g: &Tensor, first: usize) -> (Tensor, Tensor) {
    let n = g.shape[0];
    let c = g.shape[1];
    let inner: usize = g.shape[2..].iter().product();
    let mut a = Vec::with_capacity(n * first * inner);
    let mut b = Vec::with_capacity(n * (c - first) * inner);
    for i in 0..n {
        let item = g.item(i);
        a.extend_from_slice(&item[..first * inner]);
        b.extend_from_slice(&item[first * inner..]);
    }
    let mut sa = g.shape.clone();
    sa[1] = first;
    let mut sb = g.shape.clone();
    sb[1] = c - first;
    (Tensor::new(sa, a), Tensor::new(sb, b))
}

/// Mean over the T axis: `[N, C, T, H, W]` → `[N, C, 1, H, W]`.
pub fn mean_over_time(x: &Tensor) -> Tensor {
    let [n, c, t, h, w] = x.dims5();
    let plane = h * w;
    let mut out = Tensor::zeros(&[n, c, 1, h, w]);
    for nc in 0..n * c {
        let dst = &mut out.data[nc * plane..(nc + 1) * plane];
        for ti in 0..t {
            let src = &x.data[(nc * t + ti) * plane..(nc * t + ti + 1) * plane];
            for (d, s) in dst.iter_mut().zip(src) {
                *d += s;
            }
        }
        for d in dst.iter_mut() {
            *d /= t as f32;
        }
    }
    out
}

pub fn mean_over_time_backward(grad_out: &Tensor, frames: usize) -> Tensor {
    let [n, c, _, h, w] = grad_out.dims5();
    let plane = h * w;
    let mut g = Tensor::zeros(&[n, c, frames, h, w]);
    let scale = 1.0 / frames as f32;
    for nc in 0..n * c {
        let src = &grad_out.data[nc * plane..(nc + 1) * plane];
        for ti in 0..frames {
            let dst = &mut g.data[(nc * frames + ti) * plane..(nc * frames + ti + 1) * plane];
            for (d, s) in dst.iter_mut().zip(src) {
                *d = s * scale;
            }
        }
    }
    g
}
