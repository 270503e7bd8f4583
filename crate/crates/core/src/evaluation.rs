//! Segmentation metrics, cloud-cover binned robustness reports, ablation
//! tables and raster plots.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::error::{Result, S4Error};
use crate::sits::{cloud_cover_ratio, Modality, SitsPair};
use crate::training::{predict, EpochMetrics};

pub const DEFAULT_CLOUD_EDGES: [f64; 5] = [0.0, 0.05, 0.15, 0.25, 1.0];

/// `K × K` pixel counts, rows = ground truth, columns = prediction.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub classes: usize,
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        Self {
            classes,
            counts: vec![vec![0; classes]; classes],
        }
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) {
        for (r, o) in self.counts.iter_mut().zip(&other.counts) {
            for (a, b) in r.iter_mut().zip(o) {
                *a += b;
            }
        }
    }
}

/// Adds every non-ignored pixel of one prediction to `cm`.
pub fn accumulate_confusion(
    pred: &[i32],
    label: &[i32],
    ignore_index: i32,
    cm: &mut ConfusionMatrix,
) -> Result<()> {
    if pred.len() != label.len() {
        return Err(S4Error::ShapeMismatch(format!(
            "prediction has {} pixels, label {}",
            pred.len(),
            label.len()
        )));
    }
    let k = cm.classes;
    let check = |v: i32| -> Result<usize> {
        if v < 0 || v as usize >= k {
            Err(S4Error::LabelOutOfRange { value: v, classes: k })
        } else {
            Ok(v as usize)
        }
    };
    // validate before touching cm so an error leaves it unchanged
    let mut pairs = Vec::with_capacity(pred.len());
    for (&p, &g) in pred.iter().zip(label) {
        if g == ignore_index {
            continue;
        }
        pairs.push((check(g)?, check(p)?));
    }
    for (g, p) in pairs {
        cm.counts[g][p] += 1;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CloudBin {
    pub ratio_lo: f64,
    pub ratio_hi: f64,
    /// `None` when the bin holds no sample.
    pub miou: Option<f64>,
    pub n_samples: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub baseline_miou: Option<f64>,
    /// `miou - baseline_miou`, when both exist.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delta: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub confusion_matrix: Vec<Vec<u64>>,
    /// `None` for classes absent from both prediction and ground truth.
    pub per_class_iou: Vec<Option<f64>>,
    pub miou: f64,
    pub n_pixels_evaluated: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cloud_bins: Option<Vec<CloudBin>>,
}

/// Per-class IoU and their mean over present classes. An empty matrix
/// has mIoU 0.
pub fn miou(cm: &ConfusionMatrix) -> MetricsReport {
    let k = cm.classes;
    let mut ious = Vec::with_capacity(k);
    for c in 0..k {
        let tp = cm.counts[c][c];
        let row: u64 = cm.counts[c].iter().sum();
        let col: u64 = (0..k).map(|r| cm.counts[r][c]).sum();
        let union = row + col - tp;
        ious.push((union > 0).then(|| tp as f64 / union as f64));
    }
    let present: Vec<f64> = ious.iter().flatten().copied().collect();
    let m = if present.is_empty() {
        0.0
    } else {
        present.iter().sum::<f64>() / present.len() as f64
    };
    MetricsReport {
        confusion_matrix: cm.counts.clone(),
        per_class_iou: ious,
        miou: m,
        n_pixels_evaluated: cm.total(),
        cloud_bins: None,
    }
}

fn labeled<'a>(pairs: &'a [SitsPair]) -> Result<Vec<(&'a SitsPair, &'a [i32])>> {
    pairs
        .iter()
        .map(|p| {
            p.label
                .as_deref()
                .map(|l| (p, l))
                .ok_or_else(|| S4Error::InvalidConfig(format!("sample {} has no label", p.location_id)))
        })
        .collect()
}

fn sample_confusion(ckpt: &mut Checkpoint, pair: &SitsPair, label: &[i32]) -> Result<ConfusionMatrix> {
    let modality = ckpt.train.inference_modality;
    let pred = predict(ckpt, pair.series(modality))?;
    let mut cm = ConfusionMatrix::new(ckpt.model.config().classes);
    accumulate_confusion(&pred, label, crate::sits::IGNORE_LABEL, &mut cm)?;
    Ok(cm)
}

/// Test-set metrics of a fine-tuned checkpoint on its inference modality.
pub fn evaluate(ckpt: &mut Checkpoint, pairs: &[SitsPair]) -> Result<MetricsReport> {
    let mut cm = ConfusionMatrix::new(ckpt.model.config().classes);
    for (pair, label) in labeled(pairs)? {
        cm.merge(&sample_confusion(ckpt, pair, label)?);
    }
    Ok(miou(&cm))
}

/// Index of the right-open bin holding `ratio`; the last bin also takes
/// its upper edge.
pub fn bin_index(edges: &[f64], ratio: f64) -> Option<usize> {
    let bins = edges.len().checked_sub(1)?;
    (0..bins).find(|&b| {
        let hi_ok = ratio < edges[b + 1] || (b + 1 == bins && ratio <= edges[b + 1]);
        ratio >= edges[b] && hi_ok
    })
}

pub fn validate_edges(edges: &[f64]) -> Result<()> {
    if edges.len() < 2 || edges.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(S4Error::InvalidConfig(format!(
            "cloud bin edges must be strictly increasing with at least two entries, got {edges:?}"
        )));
    }
    Ok(())
}

/// Cloud cover ratio of every sample; fails on the first missing mask.
pub fn cloud_ratios(pairs: &[SitsPair]) -> Result<Vec<f64>> {
    pairs
        .iter()
        .map(|p| {
            let mask = p
                .cloud_mask
                .as_deref()
                .ok_or_else(|| S4Error::MissingCloudMask(p.location_id.clone()))?;
            let o = &p.optical;
            cloud_cover_ratio(mask, [o.frames(), o.height(), o.width()])
        })
        .collect()
}

/// Overall metrics plus mIoU per cloud-cover bin. With a baseline the
/// bins also carry the baseline mIoU and the difference.
pub fn cloud_report(
    ckpt: &mut Checkpoint,
    pairs: &[SitsPair],
    edges: &[f64],
    mut baseline: Option<&mut Checkpoint>,
) -> Result<MetricsReport> {
    validate_edges(edges)?;
    for c in std::iter::once(&*ckpt).chain(baseline.as_deref()) {
        if c.train.inference_modality != Modality::Optical {
            return Err(S4Error::ModalityMismatch {
                expected: Modality::Optical,
                got: c.train.inference_modality,
            });
        }
    }
    let ratios = cloud_ratios(pairs)?;
    let samples = labeled(pairs)?;
    let k = ckpt.model.config().classes;
    let bins = edges.len() - 1;
    let mut per_bin = vec![ConfusionMatrix::new(k); bins];
    let mut per_bin_base = vec![ConfusionMatrix::new(k); bins];
    let mut counts = vec![0usize; bins];
    let mut total = ConfusionMatrix::new(k);
    for ((pair, label), &ratio) in samples.into_iter().zip(&ratios) {
        let cm = sample_confusion(ckpt, pair, label)?;
        total.merge(&cm);
        let Some(b) = bin_index(edges, ratio) else {
            continue;
        };
        per_bin[b].merge(&cm);
        counts[b] += 1;
        if let Some(base) = baseline.as_deref_mut() {
            per_bin_base[b].merge(&sample_confusion(base, pair, label)?);
        }
    }
    let mut report = miou(&total);
    report.cloud_bins = Some(
        (0..bins)
            .map(|b| {
                let m = (counts[b] > 0).then(|| miou(&per_bin[b]).miou);
                let base = (baseline.is_some() && counts[b] > 0).then(|| miou(&per_bin_base[b]).miou);
                CloudBin {
                    ratio_lo: edges[b],
                    ratio_hi: edges[b + 1],
                    miou: m,
                    n_samples: counts[b],
                    baseline_miou: base,
                    delta: m.zip(base).map(|(a, b)| a - b),
                }
            })
            .collect(),
    );
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    /// Run name to mIoU; ordered by name.
    pub runs: BTreeMap<String, f64>,
}

pub fn ablation_table(runs: &[(String, MetricsReport)]) -> AblationTable {
    AblationTable {
        runs: runs.iter().map(|(n, r)| (n.clone(), r.miou)).collect(),
    }
}

impl AblationTable {
    pub fn to_text(&self) -> String {
        let width = self.runs.keys().map(|k| k.len()).max().unwrap_or(0).max(3);
        let mut out = format!("{:<width$}  mIoU\n", "run");
        for (name, m) in &self.runs {
            let _ = writeln!(out, "{name:<width$}  {m:.4}");
        }
        out
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

const PLOT_W: u32 = 480;
const PLOT_H: u32 = 320;
const MARGIN: u32 = 24;

fn canvas() -> RgbImage {
    let mut img = RgbImage::from_pixel(PLOT_W, PLOT_H, Rgb([255, 255, 255]));
    let axis = Rgb([0, 0, 0]);
    for x in MARGIN..PLOT_W - MARGIN {
        img.put_pixel(x, PLOT_H - MARGIN, axis);
    }
    for y in MARGIN..=PLOT_H - MARGIN {
        img.put_pixel(MARGIN, y, axis);
    }
    img
}

fn fill_rect(img: &mut RgbImage, x0: u32, x1: u32, y0: u32, y1: u32, c: Rgb<u8>) {
    for x in x0..x1.min(img.width()) {
        for y in y0..y1.min(img.height()) {
            img.put_pixel(x, y, c);
        }
    }
}

fn save_png(img: &RgbImage, path: &Path) -> Result<()> {
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| S4Error::Io(std::io::Error::other(e.to_string())))
}

/// Bar chart of per-bin mIoU on a fixed [0, 1] axis; a baseline, when
/// present, is drawn as a grey bar beside each model bar.
pub fn plot_cloud_bins(report: &MetricsReport, path: &Path) -> Result<()> {
    let bins = report
        .cloud_bins
        .as_ref()
        .ok_or_else(|| S4Error::InvalidConfig("report has no cloud bins".into()))?;
    let mut img = canvas();
    let plot_h = (PLOT_H - 2 * MARGIN) as f64;
    let slot = (PLOT_W - 2 * MARGIN) / bins.len().max(1) as u32;
    let base_y = PLOT_H - MARGIN;
    for (i, b) in bins.iter().enumerate() {
        let x0 = MARGIN + 1 + i as u32 * slot + slot / 8;
        let bar = slot * 3 / 8;
        let height = |m: f64| (m.clamp(0.0, 1.0) * plot_h).round() as u32;
        if let Some(m) = b.miou {
            fill_rect(&mut img, x0, x0 + bar, base_y - height(m), base_y, Rgb([40, 90, 200]));
        }
        if let Some(m) = b.baseline_miou {
            fill_rect(&mut img, x0 + bar, x0 + 2 * bar, base_y - height(m), base_y, Rgb([150, 150, 150]));
        }
    }
    save_png(&img, path)
}

/// Line plot of the training loss of every `split` in `history`, scaled
/// to the maximum observed value.
pub fn plot_loss_curves(history: &[EpochMetrics], path: &Path) -> Result<()> {
    let mut img = canvas();
    let max = history
        .iter()
        .map(|m| m.loss_joint)
        .filter(|v| v.is_finite())
        .fold(0.0f64, f64::max)
        .max(1e-12);
    let n = history.iter().map(|m| m.epoch).max().unwrap_or(1).max(2) as f64;
    let plot_w = (PLOT_W - 2 * MARGIN) as f64;
    let plot_h = (PLOT_H - 2 * MARGIN) as f64;
    for (split, color) in [("train", Rgb([200, 40, 40])), ("val", Rgb([40, 160, 40]))] {
        let pts: Vec<(f64, f64)> = history
            .iter()
            .filter(|m| m.split == split && m.loss_joint.is_finite())
            .map(|m| {
                let x = MARGIN as f64 + (m.epoch as f64 - 1.0) / (n - 1.0) * plot_w;
                let y = (PLOT_H - MARGIN) as f64 - m.loss_joint / max * plot_h;
                (x, y)
            })
            .collect();
        for w in pts.windows(2) {
            let steps = ((w[1].0 - w[0].0).abs().max((w[1].1 - w[0].1).abs()).ceil() as usize).max(1);
            for s in 0..=steps {
                let t = s as f64 / steps as f64;
                let x = w[0].0 + t * (w[1].0 - w[0].0);
                let y = w[0].1 + t * (w[1].1 - w[0].1);
                img.put_pixel(
                    (x.round() as u32).min(PLOT_W - 1),
                    (y.round() as u32).min(PLOT_H - 1),
                    color,
                );
            }
        }
        for &(x, y) in &pts {
            let (x, y) = (x.round() as u32, y.round() as u32);
            fill_rect(&mut img, x.saturating_sub(1), x + 2, y.saturating_sub(1), y + 2, color);
        }
    }
    save_png(&img, path)
}
