use std::collections::BTreeMap;

use crate::models::S4Net;
use crate::nn::Module;
use crate::training::TrainConfig;

/// Adam with global gradient-norm clipping. Moments are keyed by parameter
/// name and created lazily.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub clip_norm: f32,
    step: u64,
    moments: BTreeMap<String, (Vec<f32>, Vec<f32>)>,
}

impl Adam {
    pub fn new(cfg: &TrainConfig) -> Self {
        Self::restore(cfg, 0, BTreeMap::new())
    }

    pub(crate) fn restore(cfg: &TrainConfig, step: u64, moments: BTreeMap<String, (Vec<f32>, Vec<f32>)>) -> Self {
        Self {
            lr: cfg.learning_rate as f32,
            beta1: cfg.beta1 as f32,
            beta2: cfg.beta2 as f32,
            eps: cfg.adam_eps as f32,
            clip_norm: cfg.grad_clip as f32,
            step,
            moments,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn moments(&self) -> &BTreeMap<String, (Vec<f32>, Vec<f32>)> {
        &self.moments
    }

    /// Global L2 norm of every accumulated gradient.
    pub fn grad_norm(model: &mut S4Net) -> f64 {
        let mut sq = 0.0f64;
        model.visit_params("", &mut |_, p| {
            sq += p.grad.iter().map(|&g| (g as f64) * (g as f64)).sum::<f64>();
        });
        sq.sqrt()
    }

    /// Applies one update from the accumulated gradients. Parameters whose
    /// gradient is entirely zero and that have no moments yet are skipped,
    /// so heads unused by the current phase stay untouched.
    pub fn step(&mut self, model: &mut S4Net) {
        let norm = Self::grad_norm(model);
        let scale = if self.clip_norm > 0.0 && norm > self.clip_norm as f64 {
            (self.clip_norm as f64 / norm) as f32
        } else {
            1.0
        };
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let (lr, b1, b2, eps) = (self.lr, self.beta1, self.beta2, self.eps);
        let moments = &mut self.moments;
        model.visit_params("", &mut |name, p| {
            if !moments.contains_key(name) {
                if p.grad.iter().all(|&g| g == 0.0) {
                    return;
                }
                moments.insert(name.to_string(), (vec![0.0; p.value.len()], vec![0.0; p.value.len()]));
            }
            let (m, v) = moments.get_mut(name).unwrap();
            for i in 0..p.value.len() {
                let g = p.grad[i] * scale;
                m[i] = b1 * m[i] + (1.0 - b1) * g;
                v[i] = b2 * v[i] + (1.0 - b2) * g * g;
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                p.value[i] -= lr * mh / (vh.sqrt() + eps);
            }
        });
    }
}
