//! Independent reference implementations shared by the integration tests.
//! They index raw arrays with plain loops and share no code with the
//! library's vectorised paths.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Contrastive loss of two `[T, D, H, W]` maps by nested loops over
/// positions: each position anchors once per direction, the positive sits
/// at the same position of the other map and appears once in the
/// denominator next to every other position of that map.
pub fn oracle_contrastive(a: &[f64], b: &[f64], dims: [usize; 4], tau: f64) -> f64 {
    let [t, d, h, w] = dims;
    let mut positions = Vec::new();
    for ti in 0..t {
        for hi in 0..h {
            for wi in 0..w {
                positions.push((ti, hi, wi));
            }
        }
    }
    let vector = |map: &[f64], (ti, hi, wi): (usize, usize, usize)| -> Vec<f64> {
        (0..d).map(|di| map[((ti * d + di) * h + hi) * w + wi]).collect()
    };
    let cos = |u: &[f64], v: &[f64]| -> f64 {
        let mut dot = 0.0;
        let mut nu = 0.0;
        let mut nv = 0.0;
        for k in 0..u.len() {
            dot += u[k] * v[k];
            nu += u[k] * u[k];
            nv += v[k] * v[k];
        }
        dot / (nu.sqrt() * nv.sqrt())
    };
    let direction = |x: &[f64], y: &[f64]| -> f64 {
        let mut total = 0.0;
        for &p in &positions {
            let anchor = vector(x, p);
            let mut denom = 0.0;
            for &q in &positions {
                denom += (cos(&anchor, &vector(y, q)) / tau).exp();
            }
            let num = (cos(&anchor, &vector(y, p)) / tau).exp();
            total += -(num / denom).ln();
        }
        total / positions.len() as f64
    };
    0.5 * (direction(a, b) + direction(b, a))
}

pub fn oracle_l1(x_hat: &[f64], x: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..x.len() {
        s += (x_hat[i] - x[i]).abs();
    }
    s / x.len() as f64
}

/// Pixel-mean cross-entropy of `[K, P]` logits with plain softmax.
pub fn oracle_ce(logits: &[f64], label: &[i32], classes: usize, ignore: i32) -> f64 {
    let p = label.len();
    let mut total = 0.0;
    let mut n = 0;
    for px in 0..p {
        if label[px] == ignore {
            continue;
        }
        let mut denom = 0.0;
        for k in 0..classes {
            denom += logits[k * p + px].exp();
        }
        total += -(logits[label[px] as usize * p + px].exp() / denom).ln();
        n += 1;
    }
    if n == 0 {
        0.0
    } else {
        total / n as f64
    }
}

/// Exhaustive nearest-frame search: smallest distance, earliest index on
/// ties.
pub fn oracle_nearest(times: &[i64], target: i64) -> usize {
    let mut best = 0;
    for j in 1..times.len() {
        if (times[j] - target).abs() < (times[best] - target).abs() {
            best = j;
        }
    }
    best
}

/// Central finite-difference gradient of `f` at `x`.
pub fn numeric_grad(x: &[f64], eps: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + eps;
            let up = f(&probe);
            probe[i] = orig - eps;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * eps)
        })
        .collect()
}

/// Largest `|a - n| / max(|a|, |n|, floor)` over all coordinates.
pub fn max_rel_err(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max)
}

pub fn uniform(n: usize, lo: f64, hi: f64, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

/// Strictly increasing timestamps with small gaps so ties occur often.
pub fn random_times(len: usize, rng: &mut ChaCha8Rng) -> Vec<i64> {
    let mut t = rng.random_range(-20i64..20);
    (0..len)
        .map(|_| {
            t += rng.random_range(1i64..6);
            t
        })
        .collect()
}
