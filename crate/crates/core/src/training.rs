//! Pre-training (contrastive + cross-modal reconstruction), fine-tuning
//! with cross-entropy, and single-modality prediction.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, Phase};
use crate::error::{Result, S4Error};
use crate::losses::{
    cross_modal_reconstruction, cross_modal_reconstruction_grad, mmst_contrastive_pixels,
    segmentation_ce, LossConfig,
};
use crate::models::{
    batch_item_pixels, frame_window, pad_series, padded_len, scatter_pixel_grad, Encoded,
    ModelConfig, S4Net,
};
use crate::optim::Adam;
use crate::sits::{
    fit_normalization, nearest_timestamp_align, normalize, Modality, ModalitySeries,
    NormalizationStats, SitsPair, IGNORE_LABEL,
};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Ablation {
    /// `L_c + λ·L_r`
    #[default]
    Joint,
    ContrastiveOnly,
    ReconOnly,
    /// Contrastive loss between the inference-modality series and an
    /// augmented copy of it; no second modality, no reconstruction.
    SingleModal,
}

impl std::str::FromStr for Ablation {
    type Err = S4Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.replace('_', "-").to_ascii_lowercase().as_str() {
            "joint" => Ok(Ablation::Joint),
            "contrastive-only" => Ok(Ablation::ContrastiveOnly),
            "recon-only" | "reconstruction-only" => Ok(Ablation::ReconOnly),
            "single-modal" => Ok(Ablation::SingleModal),
            other => Err(S4Error::InvalidConfig(format!("unknown ablation `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub pretrain_epochs: usize,
    pub finetune_epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Global gradient-norm clip; 0 disables.
    pub grad_clip: f64,
    pub label_fraction: f64,
    pub inference_modality: Modality,
    pub ablation: Ablation,
    /// Frames per training window; must be a multiple of the model's
    /// padding grid.
    pub frames: usize,
    /// Also reconstruct the inference modality from the other one
    /// (experimental).
    pub symmetric_reconstruction: bool,
    /// Noise std (normalised units) of the single-modal augmentation.
    pub augment_noise: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            pretrain_epochs: 100,
            finetune_epochs: 50,
            batch_size: 4,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            grad_clip: 5.0,
            label_fraction: 1.0,
            inference_modality: Modality::Optical,
            ablation: Ablation::Joint,
            frames: 8,
            symmetric_reconstruction: false,
            augment_noise: 0.1,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, model: &ModelConfig) -> Result<()> {
        let bad = |m: String| Err(S4Error::InvalidConfig(m));
        if !(self.label_fraction > 0.0 && self.label_fraction <= 1.0) {
            return bad(format!("label_fraction must be in (0, 1], got {}", self.label_fraction));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1".into());
        }
        if !(self.learning_rate > 0.0) {
            return bad("learning_rate must be > 0".into());
        }
        if self.frames == 0 || self.frames % model.pad_multiple() != 0 {
            return bad(format!(
                "frames ({}) must be a positive multiple of {}",
                self.frames,
                model.pad_multiple()
            ));
        }
        if !(self.augment_noise >= 0.0) || !(self.grad_clip >= 0.0) {
            return bad("augment_noise and grad_clip must be >= 0".into());
        }
        Ok(())
    }
}

/// One line of the per-epoch metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub loss_c: f64,
    pub loss_r: f64,
    pub loss_joint: f64,
    pub split: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub loss_ce: Option<f64>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct StepLosses {
    pub contrastive: f64,
    pub reconstruction: f64,
    pub joint: f64,
}

fn mix(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn epoch_rng(seed: u64, phase: Phase, epoch: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix(mix(seed, phase as u64 + 1), epoch as u64))
}

/// Normalisation statistics over both modalities of `pairs`.
pub fn fit_dataset_stats(pairs: &[SitsPair]) -> Result<NormalizationStats> {
    if pairs.is_empty() {
        return Err(S4Error::EmptyDataset);
    }
    fit_normalization(pairs.iter().flat_map(|p| [&p.radar, &p.optical]))
}

/// Fresh model wrapped in a checkpoint at epoch 0.
pub fn init_checkpoint(
    model: ModelConfig,
    train: TrainConfig,
    loss: LossConfig,
    normalization: NormalizationStats,
) -> Result<Checkpoint> {
    train.validate(&model)?;
    loss.validate()?;
    let net = S4Net::new(model)?;
    Ok(Checkpoint {
        model: net,
        optimizer: Adam::new(&train),
        train,
        loss,
        normalization,
        phase: Phase::Init,
        epoch: 0,
        history: Vec::new(),
    })
}

/// A pair after alignment and normalisation.
#[derive(Debug, Clone)]
pub struct PreparedPair {
    pub radar: ModalitySeries,
    pub optical: ModalitySeries,
}

pub fn prepare_pair(pair: &SitsPair, stats: &NormalizationStats) -> Result<PreparedPair> {
    let aligned = nearest_timestamp_align(&pair.radar, &pair.optical)?;
    Ok(PreparedPair {
        radar: normalize(&aligned.radar, stats)?,
        optical: normalize(&aligned.optical, stats)?,
    })
}

fn window_start(frames_available: usize, frames: usize, rng: Option<&mut ChaCha8Rng>) -> usize {
    if frames_available <= frames {
        return 0;
    }
    match rng {
        Some(r) => r.random_range(0..=frames_available - frames),
        None => (frames_available - frames) / 2,
    }
}

/// Windowed, padded `[C, T, H, W]` input for one series.
fn model_input(series: &ModalitySeries, start: usize, frames: usize, multiple: usize) -> Tensor {
    pad_series(&frame_window(series, start, frames), multiple)
}

/// Mirror along W of a `[N, C, T, H, W]` tensor.
pub fn flip_w(x: &Tensor) -> Tensor {
    let w = *x.shape.last().unwrap();
    let mut out = x.clone();
    for (dst, src) in out.data.chunks_mut(w).zip(x.data.chunks(w)) {
        for (i, v) in dst.iter_mut().enumerate() {
            *v = src[w - 1 - i];
        }
    }
    out
}

fn to_f64(x: &[f32]) -> Vec<f64> {
    x.iter().map(|&v| v as f64).collect()
}

fn to_tensor(shape: &[usize], g: &[f64]) -> Tensor {
    Tensor::new(shape.to_vec(), g.iter().map(|&v| v as f32).collect())
}

/// Gradient accumulators for one encoder pass.
struct EncoderGrads {
    features: Option<Tensor>,
    skips: Vec<Option<Tensor>>,
}

impl EncoderGrads {
    fn new(enc: &Encoded) -> Self {
        Self {
            features: None,
            skips: vec![None; enc.skips.len()],
        }
    }

    fn add(&mut self, features: Tensor, skips: Vec<Option<Tensor>>) {
        match &mut self.features {
            Some(f) => f.add_assign(&features),
            None => self.features = Some(features),
        }
        for (acc, s) in self.skips.iter_mut().zip(skips) {
            if let Some(s) = s {
                match acc {
                    Some(a) => a.add_assign(&s),
                    None => *acc = Some(s),
                }
            }
        }
    }

    fn add_features(&mut self, features: Tensor) {
        self.add(features, Vec::new());
    }
}

/// Inputs of one pre-training batch, `[N, C, T, H, W]` each.
pub struct PretrainBatch {
    pub radar: Tensor,
    pub optical: Tensor,
}

impl PretrainBatch {
    fn series(&self, m: Modality) -> &Tensor {
        match m {
            Modality::Radar => &self.radar,
            Modality::Optical => &self.optical,
        }
    }
}

/// Forward (and, when `train`, backward) pass of the pre-training objective.
/// Parameter gradients are accumulated into `net`; the caller steps.
pub fn pretrain_batch(
    net: &mut S4Net,
    batch: &PretrainBatch,
    cfg: &TrainConfig,
    loss_cfg: &LossConfig,
    seed: u64,
    train: bool,
) -> Result<StepLosses> {
    let inf = cfg.inference_modality;
    let other = inf.other();
    let ablation = cfg.ablation;
    let use_c = !matches!(ablation, Ablation::ReconOnly);
    let use_r = matches!(ablation, Ablation::Joint | Ablation::ReconOnly);
    let single = ablation == Ablation::SingleModal;
    let n = batch.radar.shape[0];

    // encoder passes: [0] = inference modality, [1] = other modality or
    // the augmented inference view
    let x_inf = batch.series(inf);
    let need_second = match ablation {
        Ablation::ReconOnly => cfg.symmetric_reconstruction,
        _ => true,
    };
    let second_input = if single {
        let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, 0xA06));
        let noise = Normal::new(0.0f32, cfg.augment_noise.max(f64::MIN_POSITIVE) as f32).unwrap();
        let mut aug = flip_w(x_inf);
        if cfg.augment_noise > 0.0 {
            for v in aug.data.iter_mut() {
                *v += noise.sample(&mut rng);
            }
        }
        Some((aug, inf))
    } else if need_second {
        Some((batch.series(other).clone(), other))
    } else {
        None
    };

    let mut encs = vec![net.encode(x_inf, inf, train)?];
    if let Some((x, m)) = &second_input {
        encs.push(net.encode(x, *m, train)?);
    }
    let mut grads: Vec<EncoderGrads> = encs.iter().map(EncoderGrads::new).collect();
    let mut losses = StepLosses::default();

    if use_c {
        // first map = radar for the multi-modal loss, as the loss is
        // symmetric the order only fixes the seed streams
        let (ia, ib) = if !single && inf == Modality::Optical { (1, 0) } else { (0, 1) };
        let (pa, ctx_a) = net.project(&encs[ia].features, train)?;
        let (pb_raw, ctx_b) = net.project(&encs[ib].features, train)?;
        let pb = if single { flip_w(&pb_raw) } else { pb_raw };
        let mut ga = Tensor::zeros(&pa.shape);
        let mut gb = Tensor::zeros(&pb.shape);
        for i in 0..n {
            let out = mmst_contrastive_pixels(
                &batch_item_pixels(&pa, i),
                &batch_item_pixels(&pb, i),
                loss_cfg,
                mix(seed, i as u64),
            )?;
            losses.contrastive += out.loss / n as f64;
            let scale = 1.0 / n as f64;
            let fa: Vec<f64> = out.grad_first.iter().map(|g| g * scale).collect();
            let fb: Vec<f64> = out.grad_second.iter().map(|g| g * scale).collect();
            scatter_pixel_grad(&mut ga, i, &fa);
            scatter_pixel_grad(&mut gb, i, &fb);
        }
        if train {
            let gb = if single { flip_w(&gb) } else { gb };
            let da = net.project_backward(&ctx_a, &ga);
            let db = net.project_backward(&ctx_b, &gb);
            grads[ia].add_features(da);
            grads[ib].add_features(db);
        }
    }

    if use_r {
        let mut dirs = vec![(0usize, other)];
        if cfg.symmetric_reconstruction {
            dirs.push((1usize, inf));
        }
        let share = 1.0 / dirs.len() as f64;
        for (src, target) in dirs {
            let (x_hat, ctx) = net.reconstruct(&encs[src], target, train)?;
            let truth = batch.series(target);
            if x_hat.shape != truth.shape {
                return Err(S4Error::ShapeMismatch(format!(
                    "reconstruction {:?} vs target {:?}",
                    x_hat.shape, truth.shape
                )));
            }
            let (xh, xt) = (to_f64(&x_hat.data), to_f64(&truth.data));
            losses.reconstruction += share * cross_modal_reconstruction(&xh, &xt)?;
            if train {
                let w = share * loss_cfg.lambda;
                let g: Vec<f64> = cross_modal_reconstruction_grad(&xh, &xt).iter().map(|v| v * w).collect();
                let (gf, gs) = net.reconstruct_backward(&ctx, target, &to_tensor(&x_hat.shape, &g));
                grads[src].add(gf, gs);
            }
        }
    }

    losses.joint = if use_c { losses.contrastive } else { 0.0 }
        + if use_r { loss_cfg.lambda * losses.reconstruction } else { 0.0 };

    if train {
        for (enc, g) in encs.iter().zip(grads) {
            if let Some(f) = g.features {
                net.encode_backward(enc, f, g.skips);
            }
        }
    }
    Ok(losses)
}

fn assemble_pretrain(
    prepared: &[PreparedPair],
    idx: &[usize],
    frames: usize,
    multiple: usize,
    mut rng: Option<&mut ChaCha8Rng>,
) -> PretrainBatch {
    let mut radar = Vec::with_capacity(idx.len());
    let mut optical = Vec::with_capacity(idx.len());
    for &i in idx {
        let p = &prepared[i];
        let start = window_start(p.radar.frames(), frames, rng.as_deref_mut());
        radar.push(model_input(&p.radar, start, frames, multiple));
        optical.push(model_input(&p.optical, start, frames, multiple));
    }
    PretrainBatch {
        radar: Tensor::stack(&radar),
        optical: Tensor::stack(&optical),
    }
}

fn check_finite(v: f64, epoch: usize, step: usize) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(S4Error::NonFiniteLoss { epoch, step })
    }
}

/// Runs pre-training from the checkpoint's state up to
/// `cfg.pretrain_epochs` completed epochs. Each epoch's mean losses are
/// appended to the history and passed to `log`; with a validation set an
/// eval-mode line with `split = "val"` follows.
pub fn pretrain(
    dataset: &[SitsPair],
    val: Option<&[SitsPair]>,
    mut ckpt: Checkpoint,
    cfg: &TrainConfig,
    log: &mut dyn FnMut(&EpochMetrics),
) -> Result<Checkpoint> {
    if dataset.is_empty() {
        return Err(S4Error::EmptyDataset);
    }
    let model_cfg = ckpt.model.config().clone();
    cfg.validate(&model_cfg)?;
    let loss_cfg = ckpt.loss.clone();
    let start_epoch = match ckpt.phase {
        Phase::Pretrain => ckpt.epoch,
        Phase::Init => 0,
        Phase::Finetune => {
            return Err(S4Error::IncompatibleCheckpoint(
                "cannot resume pre-training from a fine-tuned checkpoint".into(),
            ))
        }
    };
    if ckpt.phase == Phase::Init {
        ckpt.optimizer = Adam::new(cfg);
    }
    ckpt.train = cfg.clone();
    let prepared: Vec<PreparedPair> = dataset
        .iter()
        .map(|p| prepare_pair(p, &ckpt.normalization))
        .collect::<Result<_>>()?;
    let val_prepared: Vec<PreparedPair> = val
        .unwrap_or(&[])
        .iter()
        .map(|p| prepare_pair(p, &ckpt.normalization))
        .collect::<Result<_>>()?;
    let multiple = model_cfg.pad_multiple();

    for epoch in start_epoch..cfg.pretrain_epochs {
        let mut rng = epoch_rng(cfg.seed, Phase::Pretrain, epoch);
        let mut order: Vec<usize> = (0..prepared.len()).collect();
        order.shuffle(&mut rng);
        let mut sums = StepLosses::default();
        let mut steps = 0;
        for (step, idx) in order.chunks(cfg.batch_size).enumerate() {
            let batch = assemble_pretrain(&prepared, idx, cfg.frames, multiple, Some(&mut rng));
            ckpt.model.zero_grad();
            let step_seed = mix(mix(cfg.seed, epoch as u64), step as u64);
            let l = pretrain_batch(&mut ckpt.model, &batch, cfg, &loss_cfg, step_seed, true)?;
            check_finite(l.joint, epoch, step)?;
            ckpt.optimizer.step(&mut ckpt.model);
            sums.contrastive += l.contrastive;
            sums.reconstruction += l.reconstruction;
            sums.joint += l.joint;
            steps += 1;
        }
        let s = steps as f64;
        let line = EpochMetrics {
            epoch: epoch + 1,
            loss_c: sums.contrastive / s,
            loss_r: sums.reconstruction / s,
            loss_joint: sums.joint / s,
            split: "train".into(),
            loss_ce: None,
        };
        log(&line);
        ckpt.history.push(line);
        if !val_prepared.is_empty() {
            let idx: Vec<usize> = (0..val_prepared.len()).collect();
            let mut sums = StepLosses::default();
            let chunks: Vec<&[usize]> = idx.chunks(cfg.batch_size).collect();
            for (step, c) in chunks.iter().enumerate() {
                let batch = assemble_pretrain(&val_prepared, c, cfg.frames, multiple, None);
                let l = pretrain_batch(&mut ckpt.model, &batch, cfg, &loss_cfg, mix(cfg.seed, step as u64), false)?;
                sums.contrastive += l.contrastive;
                sums.reconstruction += l.reconstruction;
                sums.joint += l.joint;
            }
            let s = chunks.len() as f64;
            let line = EpochMetrics {
                epoch: epoch + 1,
                loss_c: sums.contrastive / s,
                loss_r: sums.reconstruction / s,
                loss_joint: sums.joint / s,
                split: "val".into(),
                loss_ce: None,
            };
            log(&line);
            ckpt.history.push(line);
        }
        ckpt.phase = Phase::Pretrain;
        ckpt.epoch = epoch + 1;
    }
    Ok(ckpt)
}

/// Indices of the `⌈fraction·n⌉` labelled samples used for fine-tuning;
/// a pure function of the ids, the fraction and the seed.
pub fn select_labeled(ids: &[&str], fraction: f64, seed: u64) -> Vec<usize> {
    let n = ids.len();
    let k = ((fraction * n as f64) - 1e-9).ceil().clamp(0.0, n as f64) as usize;
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| ids[a].cmp(ids[b]));
    let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, 0x1ABE1));
    order.shuffle(&mut rng);
    let mut picked = order[..k].to_vec();
    picked.sort_unstable();
    picked
}

struct LabeledSample {
    series: ModalitySeries,
    label: Vec<i32>,
}

fn prepare_labeled(pair: &SitsPair, modality: Modality, stats: &NormalizationStats) -> Result<LabeledSample> {
    let label = pair
        .label
        .clone()
        .ok_or_else(|| S4Error::InvalidConfig(format!("sample {} has no label", pair.location_id)))?;
    Ok(LabeledSample {
        series: normalize(pair.series(modality), stats)?,
        label,
    })
}

/// Label map padded with [`IGNORE_LABEL`] to `[hp, wp]`.
fn pad_label(label: &[i32], h: usize, w: usize, hp: usize, wp: usize) -> Vec<i32> {
    let mut out = vec![IGNORE_LABEL; hp * wp];
    for hi in 0..h {
        out[hi * wp..hi * wp + w].copy_from_slice(&label[hi * w..(hi + 1) * w]);
    }
    out
}

/// Cross-entropy of a segmentation batch; backward when `train`.
pub fn finetune_batch(
    net: &mut S4Net,
    x: &Tensor,
    labels: &[Vec<i32>],
    modality: Modality,
    train: bool,
) -> Result<f64> {
    let classes = net.config().classes;
    let enc = net.encode(x, modality, train)?;
    let (logits, ctx) = net.segment(&enc, train)?;
    let n = labels.len();
    let mut grad = Tensor::zeros(&logits.shape);
    let mut total = 0.0;
    let item_len = logits.len() / n;
    for (i, label) in labels.iter().enumerate() {
        let out = segmentation_ce(&to_f64(logits.item(i)), label, classes, IGNORE_LABEL)?;
        total += out.loss / n as f64;
        for (g, v) in grad.data[i * item_len..(i + 1) * item_len].iter_mut().zip(&out.grad) {
            *g = (*v / n as f64) as f32;
        }
    }
    if train {
        let (gf, gs) = net.segment_backward(&ctx, &grad);
        net.encode_backward(&enc, gf, gs);
    }
    Ok(total)
}

/// Supervised training of encoder, decoder and segmentation head on the
/// inference modality. `labeled` is subset to `⌈label_fraction·n⌉`
/// samples first. A pre-trained or freshly initialised checkpoint starts
/// a new optimizer; a fine-tuning checkpoint resumes.
pub fn finetune(
    mut ckpt: Checkpoint,
    labeled: &[SitsPair],
    cfg: &TrainConfig,
    log: &mut dyn FnMut(&EpochMetrics),
) -> Result<Checkpoint> {
    let model_cfg = ckpt.model.config().clone();
    cfg.validate(&model_cfg)?;
    let classes = model_cfg.classes;
    for p in labeled {
        p.validate(Some(classes)).map_err(|e| {
            S4Error::IncompatibleCheckpoint(format!("dataset does not fit the model: {e}"))
        })?;
    }
    let with_labels: Vec<&SitsPair> = labeled.iter().filter(|p| p.label.is_some()).collect();
    let ids: Vec<&str> = with_labels.iter().map(|p| p.location_id.as_str()).collect();
    let chosen = select_labeled(&ids, cfg.label_fraction, cfg.seed);
    if chosen.is_empty() {
        return Err(S4Error::EmptyDataset);
    }
    let modality = cfg.inference_modality;
    let samples: Vec<LabeledSample> = chosen
        .iter()
        .map(|&i| prepare_labeled(with_labels[i], modality, &ckpt.normalization))
        .collect::<Result<_>>()?;
    let start_epoch = if ckpt.phase == Phase::Finetune {
        if ckpt.train.inference_modality != modality {
            return Err(S4Error::IncompatibleCheckpoint(
                "fine-tuning checkpoint was trained for the other modality".into(),
            ));
        }
        ckpt.epoch
    } else {
        ckpt.optimizer = Adam::new(cfg);
        ckpt.phase = Phase::Finetune;
        ckpt.epoch = 0;
        0
    };
    ckpt.train = cfg.clone();
    let multiple = model_cfg.pad_multiple();

    for epoch in start_epoch..cfg.finetune_epochs {
        let mut rng = epoch_rng(cfg.seed, Phase::Finetune, epoch);
        let mut order: Vec<usize> = (0..samples.len()).collect();
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        let mut steps = 0;
        for (step, idx) in order.chunks(cfg.batch_size).enumerate() {
            let mut xs = Vec::with_capacity(idx.len());
            let mut labels = Vec::with_capacity(idx.len());
            for &i in idx {
                let s = &samples[i];
                let start = window_start(s.series.frames(), cfg.frames, Some(&mut rng));
                let x = model_input(&s.series, start, cfg.frames, multiple);
                let (h, w) = (s.series.height(), s.series.width());
                labels.push(pad_label(&s.label, h, w, padded_len(h, multiple), padded_len(w, multiple)));
                xs.push(x);
            }
            ckpt.model.zero_grad();
            let loss = finetune_batch(&mut ckpt.model, &Tensor::stack(&xs), &labels, modality, true)?;
            check_finite(loss, epoch, step)?;
            ckpt.optimizer.step(&mut ckpt.model);
            sum += loss;
            steps += 1;
        }
        let ce = sum / steps as f64;
        let line = EpochMetrics {
            epoch: epoch + 1,
            loss_c: 0.0,
            loss_r: 0.0,
            loss_joint: ce,
            split: "train".into(),
            loss_ce: Some(ce),
        };
        log(&line);
        ckpt.history.push(line);
        ckpt.epoch = epoch + 1;
    }
    Ok(ckpt)
}

/// Segmentation map `[H, W]` of a raw (unnormalised) series from the
/// checkpoint's inference modality. Uses the eval-mode network on the
/// centre window of `frames` frames.
pub fn predict(ckpt: &mut Checkpoint, series: &ModalitySeries) -> Result<Vec<i32>> {
    let expected = ckpt.train.inference_modality;
    if series.modality() != expected {
        return Err(S4Error::ModalityMismatch {
            expected,
            got: series.modality(),
        });
    }
    let normalized = normalize(series, &ckpt.normalization)?;
    let frames = ckpt.train.frames;
    let start = window_start(normalized.frames(), frames, None);
    let window = frame_window(&normalized, start, frames);
    let logits = ckpt.model.segment_series(&window)?;
    let (h, w) = (series.height(), series.width());
    let k = ckpt.model.config().classes;
    let plane = h * w;
    Ok((0..plane)
        .map(|px| {
            let mut best = 0;
            for c in 1..k {
                if logits[c * plane + px] > logits[best * plane + px] {
                    best = c;
                }
            }
            best as i32
        })
        .collect())
}
