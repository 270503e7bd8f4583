use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use super::Param;
use crate::tensor::{gemm, Tensor};

/// Stride-1 3-D convolution over `[N, C, T, H, W]` with zero padding that
/// preserves T, H, W. `kernel` is 1 (pointwise) or an odd size.
#[derive(Debug, Clone)]
pub struct Conv3d {
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    /// `[cout, cin * kernel^3]`
    pub weight: Param,
    pub bias: Param,
}

#[derive(Debug, Clone)]
pub struct ConvCtx {
    input: Tensor,
}

impl Conv3d {
    pub fn new(cin: usize, cout: usize, kernel: usize, rng: &mut impl Rng) -> Self {
        assert!(kernel % 2 == 1, "kernel must be odd");
        let fan_in = cin * kernel.pow(3);
        // He initialisation for leaky-ReLU networks.
        let normal = Normal::new(0.0f32, (2.0 / fan_in as f32).sqrt()).unwrap();
        let weight = (0..cout * fan_in).map(|_| normal.sample(rng)).collect();
        Self {
            cin,
            cout,
            kernel,
            weight: Param::new(weight),
            bias: Param::new(vec![0.0; cout]),
        }
    }

    fn taps(&self) -> usize {
        self.cin * self.kernel.pow(3)
    }

    pub fn forward(&self, x: &Tensor) -> (Tensor, ConvCtx) {
        let [n, c, t, h, w] = x.dims5();
        assert_eq!(c, self.cin, "conv expects {} input channels", self.cin);
        let positions = t * h * w;
        let taps = self.taps();
        let mut out = Tensor::zeros(&[n, self.cout, t, h, w]);
        let out_len = self.cout * positions;
        out.data
            .par_chunks_mut(out_len)
            .enumerate()
            .for_each(|(i, y)| {
                for (co, row) in y.chunks_mut(positions).enumerate() {
                    row.fill(self.bias.value[co]);
                }
                let xi = x.item(i);
                if self.kernel == 1 {
                    gemm(self.cout, taps, positions, &self.weight.value, (taps, 1), xi, (positions, 1), y, 1.0);
                } else {
                    let cols = im2col(xi, [c, t, h, w], self.kernel);
                    gemm(self.cout, taps, positions, &self.weight.value, (taps, 1), &cols, (positions, 1), y, 1.0);
                }
            });
        (out, ConvCtx { input: x.clone() })
    }

    /// Accumulates parameter gradients and returns the input gradient.
    pub fn backward(&mut self, ctx: &ConvCtx, grad_out: &Tensor) -> Tensor {
        let x = &ctx.input;
        let [n, c, t, h, w] = x.dims5();
        let positions = t * h * w;
        let taps = self.taps();
        let weight = &self.weight.value;
        let kernel = self.kernel;
        let cout = self.cout;
        let per_sample: Vec<(Vec<f32>, Vec<f32>)> = (0..n)
            .into_par_iter()
            .map(|i| {
                let dy = grad_out.item(i);
                let xi = x.item(i);
                let cols_owned;
                let cols: &[f32] = if kernel == 1 {
                    xi
                } else {
                    cols_owned = im2col(xi, [c, t, h, w], kernel);
                    &cols_owned
                };
                let mut dw = vec![0.0f32; cout * taps];
                gemm(cout, positions, taps, dy, (positions, 1), cols, (1, positions), &mut dw, 0.0);
                let mut dcols = vec![0.0f32; taps * positions];
                gemm(taps, cout, positions, weight, (1, taps), dy, (positions, 1), &mut dcols, 0.0);
                let dx = if kernel == 1 {
                    dcols
                } else {
                    col2im(&dcols, [c, t, h, w], kernel)
                };
                (dw, dx)
            })
            .collect();
        let mut grad_in = Tensor::zeros(&x.shape);
        let item_len = c * positions;
        for (i, (dw, dx)) in per_sample.into_iter().enumerate() {
            for (g, d) in self.weight.grad.iter_mut().zip(&dw) {
                *g += d;
            }
            grad_in.data[i * item_len..(i + 1) * item_len].copy_from_slice(&dx);
        }
        for i in 0..n {
            for (co, row) in grad_out.item(i).chunks(positions).enumerate() {
                self.bias.grad[co] += row.iter().sum::<f32>();
            }
        }
        grad_in
    }
}

/// Unfolds `[C, T, H, W]` into `[C * k^3, T * H * W]` with zero padding k/2.
fn im2col(x: &[f32], [c, t, h, w]: [usize; 4], k: usize) -> Vec<f32> {
    let positions = t * h * w;
    let pad = (k / 2) as isize;
    let mut cols = vec![0.0f32; c * k * k * k * positions];
    let mut row = 0;
    for ci in 0..c {
        let plane = &x[ci * positions..(ci + 1) * positions];
        for kt in 0..k {
            for kh in 0..k {
                for kw in 0..k {
                    let dst = &mut cols[row * positions..(row + 1) * positions];
                    let (dt, dh, dw) = (kt as isize - pad, kh as isize - pad, kw as isize - pad);
                    let (w_lo, w_hi) = valid_range(w, dw);
                    for ti in 0..t {
                        let ts = ti as isize + dt;
                        if ts < 0 || ts >= t as isize {
                            continue;
                        }
                        for hi in 0..h {
                            let hs = hi as isize + dh;
                            if hs < 0 || hs >= h as isize {
                                continue;
                            }
                            let d0 = (ti * h + hi) * w;
                            let s0 = (ts as usize * h + hs as usize) * w;
                            for wi in w_lo..w_hi {
                                dst[d0 + wi] = plane[s0 + (wi as isize + dw) as usize];
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
    cols
}

fn col2im(cols: &[f32], [c, t, h, w]: [usize; 4], k: usize) -> Vec<f32> {
    let positions = t * h * w;
    let pad = (k / 2) as isize;
    let mut x = vec![0.0f32; c * positions];
    let mut row = 0;
    for ci in 0..c {
        let plane = &mut x[ci * positions..(ci + 1) * positions];
        for kt in 0..k {
            for kh in 0..k {
                for kw in 0..k {
                    let src = &cols[row * positions..(row + 1) * positions];
                    let (dt, dh, dw) = (kt as isize - pad, kh as isize - pad, kw as isize - pad);
                    let (w_lo, w_hi) = valid_range(w, dw);
                    for ti in 0..t {
                        let ts = ti as isize + dt;
                        if ts < 0 || ts >= t as isize {
                            continue;
                        }
                        for hi in 0..h {
                            let hs = hi as isize + dh;
                            if hs < 0 || hs >= h as isize {
                                continue;
                            }
                            let d0 = (ti * h + hi) * w;
                            let s0 = (ts as usize * h + hs as usize) * w;
                            for wi in w_lo..w_hi {
                                plane[s0 + (wi as isize + dw) as usize] += src[d0 + wi];
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
    x
}

/// Output columns `wi` for which `wi + shift` lies inside `0..len`.
fn valid_range(len: usize, shift: isize) -> (usize, usize) {
    let lo = (-shift).max(0) as usize;
    let hi = (len as isize - shift).clamp(0, len as isize) as usize;
    (lo.min(hi), hi)
}
