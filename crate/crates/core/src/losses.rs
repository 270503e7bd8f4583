//! Pre-training and fine-tuning objectives with analytic gradients.
//!
//! All losses work in f64 on flat slices. The contrastive loss views a
//! feature map as a `[P, D]` matrix of pixel vectors, where `P = T'·H'·W'`
//! and row `p` is the position `(t, h, w)` in C order.

use std::sync::atomic::{AtomicU64, Ordering};

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, S4Error};

const NORM_FLOOR: f64 = 1e-12;

static ZERO_NORM_EVENTS: AtomicU64 = AtomicU64::new(0);
static EMPTY_LABEL_EVENTS: AtomicU64 = AtomicU64::new(0);

/// How many cosine similarities involved a (near) zero vector so far.
pub fn zero_norm_events() -> u64 {
    ZERO_NORM_EVENTS.load(Ordering::Relaxed)
}

/// How many cross-entropy evaluations had no labelled pixel.
pub fn empty_label_events() -> u64 {
    EMPTY_LABEL_EVENTS.load(Ordering::Relaxed)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    /// Softmax temperature of the contrastive loss.
    pub tau: f64,
    /// Weight of the reconstruction term in the joint objective.
    pub lambda: f64,
    /// Cap on negatives per anchor; `None` uses every other position.
    pub max_negatives: Option<usize>,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            tau: 0.5,
            lambda: 1.0,
            max_negatives: None,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(S4Error::InvalidConfig(format!("tau must be > 0, got {}", self.tau)));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(S4Error::InvalidConfig(format!(
                "lambda must be >= 0, got {}",
                self.lambda
            )));
        }
        if self.max_negatives == Some(0) {
            return Err(S4Error::InvalidConfig("max_negatives must be >= 1".into()));
        }
        Ok(())
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// `uᵀv / (‖u‖‖v‖)`. A vector with norm below 1e-12 yields 0 and bumps
/// [`zero_norm_events`].
pub fn cosine_sim(u: &[f64], v: &[f64]) -> f64 {
    assert_eq!(u.len(), v.len(), "cosine_sim on vectors of different length");
    let (nu, nv) = (norm(u), norm(v));
    if nu < NORM_FLOOR || nv < NORM_FLOOR {
        ZERO_NORM_EVENTS.fetch_add(1, Ordering::Relaxed);
        return 0.0;
    }
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    (dot / (nu * nv)).clamp(-1.0, 1.0)
}

/// `log Σ exp(x)` with max subtraction.
fn log_sum_exp(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// InfoNCE for one anchor: the positive appears once in the denominator
/// alongside every negative.
pub fn infonce_anchor(anchor: &[f64], positive: &[f64], negatives: &[&[f64]], tau: f64) -> Result<f64> {
    if negatives.is_empty() {
        return Err(S4Error::EmptyNegativeSet);
    }
    if !(tau > 0.0) {
        return Err(S4Error::InvalidConfig(format!("tau must be > 0, got {tau}")));
    }
    let pos = cosine_sim(anchor, positive) / tau;
    let logits: Vec<f64> = std::iter::once(pos)
        .chain(negatives.iter().map(|n| cosine_sim(anchor, n) / tau))
        .collect();
    Ok((log_sum_exp(logits.iter().copied()) - pos).max(0.0))
}

/// Pixel vectors of one feature map, row-major `[pixels, dim]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PixelFeatures {
    pub pixels: usize,
    pub dim: usize,
    pub data: Vec<f64>,
}

impl PixelFeatures {
    pub fn new(pixels: usize, dim: usize, data: Vec<f64>) -> Self {
        assert_eq!(pixels * dim, data.len());
        Self { pixels, dim, data }
    }

    pub fn row(&self, p: usize) -> &[f64] {
        &self.data[p * self.dim..(p + 1) * self.dim]
    }
}

#[derive(Debug, Clone)]
pub struct ContrastiveOutput {
    pub loss: f64,
    /// Gradient w.r.t. the first (radar) map, same layout as the input.
    pub grad_first: Vec<f64>,
    pub grad_second: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AnchorSide {
    First,
    Second,
}

/// Negatives for one anchor: every other position, or a uniform subset of
/// `cap` of them drawn from `(seed, side, anchor)`. Sorted ascending.
pub fn negative_indices(
    anchor: usize,
    pixels: usize,
    cap: Option<usize>,
    seed: u64,
    side: AnchorSide,
) -> Vec<usize> {
    let others = pixels - 1;
    match cap {
        Some(k) if k < others => {
            let stream = seed
                ^ (anchor as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
                ^ match side {
                    AnchorSide::First => 0,
                    AnchorSide::Second => 0xD1B5_4A32_D192_ED03,
                };
            let mut rng = ChaCha8Rng::seed_from_u64(stream);
            let mut picked: Vec<usize> = sample(&mut rng, others, k)
                .into_iter()
                .map(|i| if i >= anchor { i + 1 } else { i })
                .collect();
            picked.sort_unstable();
            picked
        }
        _ => (0..pixels).filter(|&i| i != anchor).collect(),
    }
}

fn unit_rows(f: &PixelFeatures) -> (Vec<f64>, Vec<f64>) {
    let mut unit = vec![0.0; f.data.len()];
    let mut norms = vec![0.0; f.pixels];
    for p in 0..f.pixels {
        let row = f.row(p);
        let n = norm(row);
        norms[p] = n;
        if n < NORM_FLOOR {
            ZERO_NORM_EVENTS.fetch_add(1, Ordering::Relaxed);
            continue;
        }
        for (u, v) in unit[p * f.dim..(p + 1) * f.dim].iter_mut().zip(row) {
            *u = v / n;
        }
    }
    (unit, norms)
}

/// Multi-modal space-time contrastive loss and its gradient.
///
/// Every position of `first` is an anchor whose positive is the same
/// position in `second` and whose negatives are other positions of
/// `second`; the per-anchor losses are averaged. The same is done with
/// `second` as the anchor map, and the two averages are averaged.
pub fn mmst_contrastive_pixels(
    first: &PixelFeatures,
    second: &PixelFeatures,
    cfg: &LossConfig,
    seed: u64,
) -> Result<ContrastiveOutput> {
    if first.pixels != second.pixels || first.dim != second.dim {
        return Err(S4Error::ShapeMismatch(format!(
            "contrastive maps are {}x{} and {}x{}",
            first.pixels, first.dim, second.pixels, second.dim
        )));
    }
    cfg.validate()?;
    let (p, d) = (first.pixels, first.dim);
    if p < 2 {
        return Err(S4Error::DegenerateMap);
    }
    let (ua, na) = unit_rows(first);
    let (ub, nb) = unit_rows(second);
    let tau = cfg.tau;

    // sim[i * p + j] = cos(first_i, second_j) / tau
    let mut sim = vec![0.0f64; p * p];
    for i in 0..p {
        let ai = &ua[i * d..(i + 1) * d];
        for j in 0..p {
            let bj = &ub[j * d..(j + 1) * d];
            sim[i * p + j] = ai.iter().zip(bj).map(|(x, y)| x * y).sum::<f64>() / tau;
        }
    }

    // dL/dsim
    let mut g = vec![0.0f64; p * p];
    let weight = 0.5 / p as f64;
    let mut total = 0.0;
    for side in [AnchorSide::First, AnchorSide::Second] {
        let mut side_sum = 0.0;
        for a in 0..p {
            let negs = negative_indices(a, p, cfg.max_negatives, seed, side);
            let at = |k: usize| match side {
                AnchorSide::First => a * p + k,
                AnchorSide::Second => k * p + a,
            };
            let cand = std::iter::once(a).chain(negs.iter().copied());
            let lse = log_sum_exp(cand.clone().map(|k| sim[at(k)]));
            side_sum += lse - sim[at(a)];
            for k in cand {
                g[at(k)] += weight * (sim[at(k)] - lse).exp();
            }
            g[at(a)] -= weight;
        }
        total += side_sum / p as f64;
    }
    let loss = 0.5 * total;

    // Back through the dot products, then the normalisation.
    let mut d_ua = vec![0.0f64; p * d];
    let mut d_ub = vec![0.0f64; p * d];
    for i in 0..p {
        for j in 0..p {
            let gij = g[i * p + j] / tau;
            if gij == 0.0 {
                continue;
            }
            for k in 0..d {
                d_ua[i * d + k] += gij * ub[j * d + k];
                d_ub[j * d + k] += gij * ua[i * d + k];
            }
        }
    }
    let grad_first = unit_backward(&ua, &na, &d_ua, d);
    let grad_second = unit_backward(&ub, &nb, &d_ub, d);
    Ok(ContrastiveOutput {
        loss,
        grad_first,
        grad_second,
    })
}

/// Gradient through `u = v / ‖v‖`: `(du − u (u·du)) / ‖v‖`.
fn unit_backward(unit: &[f64], norms: &[f64], d_unit: &[f64], dim: usize) -> Vec<f64> {
    let mut out = vec![0.0; unit.len()];
    for (p, &n) in norms.iter().enumerate() {
        if n < NORM_FLOOR {
            continue;
        }
        let u = &unit[p * dim..(p + 1) * dim];
        let du = &d_unit[p * dim..(p + 1) * dim];
        let proj: f64 = u.iter().zip(du).map(|(a, b)| a * b).sum();
        for k in 0..dim {
            out[p * dim + k] = (du[k] - u[k] * proj) / n;
        }
    }
    out
}

/// Loss-only convenience over [`mmst_contrastive_pixels`].
pub fn mmst_contrastive(
    first: &PixelFeatures,
    second: &PixelFeatures,
    cfg: &LossConfig,
    seed: u64,
) -> Result<f64> {
    mmst_contrastive_pixels(first, second, cfg, seed).map(|o| o.loss)
}

/// Mean absolute error over every element.
pub fn cross_modal_reconstruction(x_hat: &[f64], x: &[f64]) -> Result<f64> {
    if x_hat.len() != x.len() {
        return Err(S4Error::ShapeMismatch(format!(
            "reconstruction has {} values, target {}",
            x_hat.len(),
            x.len()
        )));
    }
    if x.is_empty() {
        return Err(S4Error::ShapeMismatch("empty reconstruction target".into()));
    }
    let sum: f64 = x_hat.iter().zip(x).map(|(a, b)| (a - b).abs()).sum();
    Ok(sum / x.len() as f64)
}

/// Gradient of [`cross_modal_reconstruction`] w.r.t. `x_hat` (subgradient
/// 0 where the two agree).
pub fn cross_modal_reconstruction_grad(x_hat: &[f64], x: &[f64]) -> Vec<f64> {
    let n = x.len() as f64;
    x_hat
        .iter()
        .zip(x)
        .map(|(a, b)| {
            let d = a - b;
            if d > 0.0 {
                1.0 / n
            } else if d < 0.0 {
                -1.0 / n
            } else {
                0.0
            }
        })
        .collect()
}

/// `L_c + λ·L_r`
pub fn joint_loss(contrastive: f64, reconstruction: f64, cfg: &LossConfig) -> f64 {
    contrastive + cfg.lambda * reconstruction
}

#[derive(Debug, Clone)]
pub struct CrossEntropyOutput {
    pub loss: f64,
    /// Same layout as the logits, `[K, H, W]`.
    pub grad: Vec<f64>,
    pub counted: usize,
}

/// Pixel-mean softmax cross-entropy over `[K, H, W]` logits, skipping
/// `ignore_index` pixels. A fully ignored map gives loss 0.
pub fn segmentation_ce(
    logits: &[f64],
    label: &[i32],
    classes: usize,
    ignore_index: i32,
) -> Result<CrossEntropyOutput> {
    let pixels = label.len();
    if logits.len() != classes * pixels {
        return Err(S4Error::ShapeMismatch(format!(
            "logits have {} values, expected {classes} x {pixels}",
            logits.len()
        )));
    }
    let mut grad = vec![0.0f64; logits.len()];
    let mut loss = 0.0;
    let mut counted = 0usize;
    for (px, &y) in label.iter().enumerate() {
        if y == ignore_index {
            continue;
        }
        if y < 0 || y as usize >= classes {
            return Err(S4Error::LabelOutOfRange { value: y, classes });
        }
        let lse = log_sum_exp((0..classes).map(|k| logits[k * pixels + px]));
        loss += lse - logits[y as usize * pixels + px];
        for k in 0..classes {
            grad[k * pixels + px] = (logits[k * pixels + px] - lse).exp();
        }
        grad[y as usize * pixels + px] -= 1.0;
        counted += 1;
    }
    if counted == 0 {
        EMPTY_LABEL_EVENTS.fetch_add(1, Ordering::Relaxed);
        log::debug!("cross-entropy over a map with no labelled pixel");
        return Ok(CrossEntropyOutput {
            loss: 0.0,
            grad,
            counted,
        });
    }
    let scale = 1.0 / counted as f64;
    grad.iter_mut().for_each(|g| *g *= scale);
    Ok(CrossEntropyOutput {
        loss: loss * scale,
        grad,
        counted,
    })
}
