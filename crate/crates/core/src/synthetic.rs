//! Synthetic paired radar/optical time series with ground-truth class maps
//! and cloud masks.
//!
//! Every sample is a pure function of `(cfg, sample_index)`. Its randomness
//! is split into independent streams (world layout, acquisition times,
//! optical sensor noise, radar speckle, clouds), so changing the cloud rate
//! leaves every other stream untouched.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data_io::{write_manifest, write_sample, Manifest, ManifestEntry, Split};
use crate::error::{Result, S4Error};
use crate::sits::{Modality, ModalitySeries, SitsPair};

const DAY: i64 = 86_400;
/// 2021-01-01T00:00:00Z
const YEAR_START: i64 = 1_609_459_200;

/// Seasonal response of one class: a Gaussian bump over the day of year.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Phenology {
    pub peak_day: f64,
    pub amplitude: f64,
    pub width: f64,
}

impl Phenology {
    pub fn value(&self, day: f64) -> f64 {
        let z = (day - self.peak_day) / self.width;
        0.1 + self.amplitude * (-0.5 * z * z).exp()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorldConfig {
    pub height: usize,
    pub width: usize,
    /// Number of classes including background class 0.
    pub classes: usize,
    /// Voronoi seeds per sample; each seed's cell gets a random class.
    pub patch_count: usize,
    pub optical_frames: usize,
    pub radar_frames: usize,
    /// One entry per class; empty means the built-in defaults.
    pub phenology: Vec<Phenology>,
    /// Probability that an optical frame has a cloud event.
    pub cloud_rate: f64,
    /// Cloud blob radii as fractions of the larger image side.
    pub cloud_radius_min: f64,
    pub cloud_radius_max: f64,
    /// Standard deviation of additive optical sensor noise.
    pub optical_noise: f64,
    /// Log-normal sigma of multiplicative radar speckle.
    pub speckle_sigma: f64,
    pub seed: u64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            height: 16,
            width: 16,
            classes: 5,
            patch_count: 10,
            optical_frames: 12,
            radar_frames: 20,
            phenology: Vec::new(),
            cloud_rate: 0.3,
            cloud_radius_min: 0.2,
            cloud_radius_max: 0.6,
            optical_noise: 0.02,
            speckle_sigma: 0.2,
            seed: 0,
        }
    }
}

/// Built-in class responses; class 0 is a flat background.
fn default_phenology(class: usize) -> Phenology {
    const TABLE: [(f64, f64, f64); 8] = [
        (182.0, 0.0, 60.0),
        (120.0, 0.45, 35.0),
        (200.0, 0.45, 35.0),
        (160.0, 0.25, 70.0),
        (250.0, 0.35, 25.0),
        (90.0, 0.3, 50.0),
        (300.0, 0.4, 30.0),
        (140.0, 0.55, 20.0),
    ];
    let (peak_day, amplitude, width) = TABLE[class % TABLE.len()];
    // past the table, shift the peak so classes stay distinct
    let shift = (class / TABLE.len()) as f64 * 17.0;
    Phenology {
        peak_day: peak_day + shift,
        amplitude: if class == 0 { 0.0 } else { amplitude },
        width,
    }
}

/// Fixed RGB basis per class; scales the phenology value per channel.
fn class_color(class: usize) -> [f64; 3] {
    const COLORS: [[f64; 3]; 8] = [
        [0.9, 0.8, 0.7],
        [0.6, 1.0, 0.5],
        [0.9, 0.9, 0.4],
        [0.5, 0.8, 0.9],
        [1.0, 0.6, 0.6],
        [0.7, 0.7, 1.0],
        [0.8, 1.0, 0.8],
        [1.0, 0.9, 0.5],
    ];
    COLORS[class % COLORS.len()]
}

/// Radar backscatter per class: `offset + gain * phenology` for each of the
/// two channels.
fn radar_response(class: usize) -> [(f64, f64); 2] {
    let c = class as f64;
    [(0.05 + 0.02 * c, 0.8), (0.1 + 0.015 * (c * 1.7).sin().abs(), -0.5)]
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(S4Error::InvalidConfig(m));
        if self.classes < 2 {
            return bad(format!("world.classes must be >= 2, got {}", self.classes));
        }
        if self.height < 8 || self.width < 8 {
            return bad(format!(
                "world grid must be at least 8x8, got {}x{}",
                self.height, self.width
            ));
        }
        if self.patch_count == 0 {
            return bad("world.patch_count must be >= 1".into());
        }
        if self.optical_frames == 0 || self.radar_frames == 0 {
            return bad("frame counts must be >= 1".into());
        }
        if !(0.0..=1.0).contains(&self.cloud_rate) {
            return bad(format!("world.cloud_rate must be in [0, 1], got {}", self.cloud_rate));
        }
        if !(self.cloud_radius_min >= 0.0 && self.cloud_radius_min <= self.cloud_radius_max) {
            return bad("need 0 <= cloud_radius_min <= cloud_radius_max".into());
        }
        if !(self.optical_noise >= 0.0 && self.speckle_sigma >= 0.0) {
            return bad("noise scales must be >= 0".into());
        }
        if !self.phenology.is_empty() {
            if self.phenology.len() != self.classes {
                return bad(format!(
                    "world.phenology has {} entries for {} classes",
                    self.phenology.len(),
                    self.classes
                ));
            }
            if self.phenology.iter().skip(1).any(|p| !(p.amplitude > 0.0 && p.width > 0.0)) {
                return bad("phenology amplitudes and widths must be positive".into());
            }
        }
        Ok(())
    }

    pub fn class_phenology(&self) -> Vec<Phenology> {
        if self.phenology.is_empty() {
            (0..self.classes).map(default_phenology).collect()
        } else {
            self.phenology.clone()
        }
    }
}

#[derive(Debug, Clone, Copy)]
enum Stream {
    World = 1,
    Time = 2,
    OpticalNoise = 3,
    Speckle = 4,
    Clouds = 5,
}

fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn stream(seed: u64, sample: u64, which: Stream) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix(mix(seed ^ mix(sample)) ^ which as u64))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticWorld {
    pub height: usize,
    pub width: usize,
    /// `[H, W]`
    pub class_map: Vec<i32>,
    pub phenology: Vec<Phenology>,
    pub sample_index: u64,
}

impl SyntheticWorld {
    pub fn class_at(&self, h: usize, w: usize) -> usize {
        self.class_map[h * self.width + w] as usize
    }
}

/// World layout for sample 0.
pub fn generate_world(cfg: &WorldConfig) -> Result<SyntheticWorld> {
    generate_world_for(cfg, 0)
}

/// Nearest-seed partition of the grid with a random class per seed.
pub fn generate_world_for(cfg: &WorldConfig, sample_index: u64) -> Result<SyntheticWorld> {
    cfg.validate()?;
    let mut rng = stream(cfg.seed, sample_index, Stream::World);
    let seeds: Vec<(f64, f64, i32)> = (0..cfg.patch_count)
        .map(|_| {
            (
                rng.random_range(0.0..cfg.height as f64),
                rng.random_range(0.0..cfg.width as f64),
                rng.random_range(0..cfg.classes) as i32,
            )
        })
        .collect();
    let mut class_map = Vec::with_capacity(cfg.height * cfg.width);
    for h in 0..cfg.height {
        for w in 0..cfg.width {
            let (y, x) = (h as f64 + 0.5, w as f64 + 0.5);
            let nearest = seeds
                .iter()
                .min_by(|a, b| {
                    let da = (a.0 - y).powi(2) + (a.1 - x).powi(2);
                    let db = (b.0 - y).powi(2) + (b.1 - x).powi(2);
                    da.total_cmp(&db)
                })
                .expect("patch_count >= 1");
            class_map.push(nearest.2);
        }
    }
    Ok(SyntheticWorld {
        height: cfg.height,
        width: cfg.width,
        class_map,
        phenology: cfg.class_phenology(),
        sample_index,
    })
}

/// Acquisition days: evenly spread over the year with a few days of jitter.
/// Radar acquisitions fall at midday, optical at midnight, so the two never
/// coincide.
fn acquisition_times(cfg: &WorldConfig, sample_index: u64) -> (Vec<i64>, Vec<i64>) {
    let mut rng = stream(cfg.seed, sample_index, Stream::Time);
    let mut days = |n: usize| -> Vec<i64> {
        let step = 365.0 / n as f64;
        let mut out: Vec<i64> = (0..n)
            .map(|i| {
                let jitter = rng.random_range(-0.3..0.3) * step;
                ((i as f64 + 0.5) * step + jitter).floor() as i64
            })
            .collect();
        for i in 1..n {
            if out[i] <= out[i - 1] {
                out[i] = out[i - 1] + 1;
            }
        }
        out
    };
    let optical = days(cfg.optical_frames);
    let radar = days(cfg.radar_frames);
    (
        optical.iter().map(|d| YEAR_START + d * DAY).collect(),
        radar.iter().map(|d| YEAR_START + d * DAY + DAY / 2).collect(),
    )
}

fn day_of_year(ts: i64) -> f64 {
    (ts - YEAR_START) as f64 / DAY as f64
}

/// Optical RGB series and its cloud mask `[T, H, W]`.
pub fn render_optical(world: &SyntheticWorld, cfg: &WorldConfig) -> Result<(ModalitySeries, Vec<bool>)> {
    cfg.validate()?;
    let (times, _) = acquisition_times(cfg, world.sample_index);
    let (t, h, w) = (cfg.optical_frames, world.height, world.width);
    let mut noise_rng = stream(cfg.seed, world.sample_index, Stream::OpticalNoise);
    let noise = Normal::new(0.0, cfg.optical_noise.max(f64::MIN_POSITIVE)).unwrap();
    let mut data = vec![0.0f32; t * 3 * h * w];
    for (ti, &ts) in times.iter().enumerate() {
        let day = day_of_year(ts);
        for hi in 0..h {
            for wi in 0..w {
                let class = world.class_at(hi, wi);
                let v = world.phenology[class].value(day);
                let color = class_color(class);
                for c in 0..3 {
                    let n = if cfg.optical_noise > 0.0 {
                        noise.sample(&mut noise_rng)
                    } else {
                        0.0
                    };
                    data[((ti * 3 + c) * h + hi) * w + wi] = (color[c] * v + n) as f32;
                }
            }
        }
    }

    let mut cloud_rng = stream(cfg.seed, world.sample_index, Stream::Clouds);
    let mut mask = vec![false; t * h * w];
    let side = h.max(w) as f64;
    for ti in 0..t {
        if !cloud_rng.random_bool(cfg.cloud_rate) {
            continue;
        }
        let blobs = cloud_rng.random_range(1..=2);
        for _ in 0..blobs {
            let cy = cloud_rng.random_range(0.0..h as f64);
            let cx = cloud_rng.random_range(0.0..w as f64);
            let ry = cloud_rng.random_range(cfg.cloud_radius_min..=cfg.cloud_radius_max) * side;
            let rx = cloud_rng.random_range(cfg.cloud_radius_min..=cfg.cloud_radius_max) * side;
            for hi in 0..h {
                for wi in 0..w {
                    let dy = (hi as f64 + 0.5 - cy) / ry.max(1e-9);
                    let dx = (wi as f64 + 0.5 - cx) / rx.max(1e-9);
                    if dy * dy + dx * dx <= 1.0 {
                        mask[(ti * h + hi) * w + wi] = true;
                    }
                }
            }
        }
        let brightness = 0.95 + cloud_rng.random_range(0.0..0.05);
        for hi in 0..h {
            for wi in 0..w {
                if mask[(ti * h + hi) * w + wi] {
                    for c in 0..3 {
                        data[((ti * 3 + c) * h + hi) * w + wi] = brightness as f32;
                    }
                }
            }
        }
    }
    let series = ModalitySeries::new(Modality::Optical, [t, 3, h, w], times, data)?;
    Ok((series, mask))
}

/// Two-channel radar series: per-class linear responses to the phenology
/// times log-normal speckle. Clouds never reach it.
pub fn render_radar(world: &SyntheticWorld, cfg: &WorldConfig) -> Result<ModalitySeries> {
    cfg.validate()?;
    let (_, times) = acquisition_times(cfg, world.sample_index);
    let (t, h, w) = (cfg.radar_frames, world.height, world.width);
    let mut rng = stream(cfg.seed, world.sample_index, Stream::Speckle);
    let speckle = Normal::new(0.0, cfg.speckle_sigma.max(f64::MIN_POSITIVE)).unwrap();
    let mut data = vec![0.0f32; t * 2 * h * w];
    for (ti, &ts) in times.iter().enumerate() {
        let day = day_of_year(ts);
        for hi in 0..h {
            for wi in 0..w {
                let class = world.class_at(hi, wi);
                let v = world.phenology[class].value(day);
                for (c, (offset, gain)) in radar_response(class).into_iter().enumerate() {
                    let clean = offset + gain * v + 0.5;
                    let factor = if cfg.speckle_sigma > 0.0 {
                        speckle.sample(&mut rng).exp()
                    } else {
                        1.0
                    };
                    data[((ti * 2 + c) * h + hi) * w + wi] = (clean * factor) as f32;
                }
            }
        }
    }
    ModalitySeries::new(Modality::Radar, [t, 2, h, w], times, data)
}

/// One labelled pair with its cloud mask.
pub fn generate_sample(cfg: &WorldConfig, sample_index: u64) -> Result<SitsPair> {
    let world = generate_world_for(cfg, sample_index)?;
    let (optical, mask) = render_optical(&world, cfg)?;
    let radar = render_radar(&world, cfg)?;
    Ok(SitsPair {
        location_id: sample_id(cfg.seed, sample_index),
        radar,
        optical,
        label: Some(world.class_map),
        cloud_mask: Some(mask),
    })
}

pub fn sample_id(seed: u64, index: u64) -> String {
    format!("s{seed}_{index:05}")
}

/// Samples `0..n` generated in parallel; order and bytes do not depend on
/// the thread count.
pub fn generate_samples(cfg: &WorldConfig, indices: std::ops::Range<u64>) -> Result<Vec<SitsPair>> {
    indices
        .into_par_iter()
        .map(|i| generate_sample(cfg, i))
        .collect()
}

/// Split sizes for `n` samples: 70 / 15 / 15 with rounding, test takes the
/// remainder.
pub fn split_sizes(n: usize) -> (usize, usize, usize) {
    let train = ((n as f64) * 0.7).round() as usize;
    let val = (((n as f64) * 0.15).round() as usize).min(n - train);
    (train, val, n - train - val)
}

/// Writes `n` sample archives under `out_dir/samples/` and a manifest at
/// `out_dir/manifest.json`.
pub fn generate_dataset(cfg: &WorldConfig, n: usize, out_dir: &Path) -> Result<Manifest> {
    if n == 0 {
        return Err(S4Error::InvalidConfig("dataset needs at least one sample".into()));
    }
    cfg.validate()?;
    fs::create_dir_all(out_dir.join("samples"))?;
    (0..n as u64).into_par_iter().try_for_each(|i| -> Result<()> {
        let pair = generate_sample(cfg, i)?;
        write_sample(&pair, &out_dir.join("samples").join(&pair.location_id))?;
        Ok(())
    })?;

    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(mix(cfg.seed ^ 0x5151));
    order.shuffle(&mut rng);
    let (train, val, _) = split_sizes(n);
    let mut split = vec![Split::Test; n];
    for (rank, &i) in order.iter().enumerate() {
        split[i] = if rank < train {
            Split::Train
        } else if rank < train + val {
            Split::Val
        } else {
            Split::Test
        };
    }
    let entries = (0..n)
        .map(|i| {
            let id = sample_id(cfg.seed, i as u64);
            ManifestEntry {
                relative_path: format!("samples/{id}"),
                sample_id: id,
                split: split[i],
                has_label: true,
            }
        })
        .collect();
    let manifest = Manifest::new(out_dir.to_path_buf(), entries)?;
    write_manifest(&manifest, &out_dir.join("manifest.json"))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sits::{cloud_cover_ratio, nearest_timestamp_align};

    fn quiet() -> WorldConfig {
        WorldConfig {
            optical_noise: 0.0,
            speckle_sigma: 0.0,
            cloud_rate: 0.0,
            ..WorldConfig::default()
        }
    }

    #[test]
    fn world_is_deterministic_and_shaped() {
        let cfg = WorldConfig {
            height: 8,
            width: 8,
            ..WorldConfig::default()
        };
        let a = generate_world(&cfg).unwrap();
        assert_eq!(a, generate_world(&cfg).unwrap());
        assert_eq!(a.class_map.len(), 64);
        assert!(a.class_map.iter().all(|&c| (c as usize) < cfg.classes));
    }

    #[test]
    fn single_patch_gives_single_region() {
        let cfg = WorldConfig {
            patch_count: 1,
            classes: 2,
            ..WorldConfig::default()
        };
        for seed in 0..6 {
            let world = generate_world(&WorldConfig { seed, ..cfg.clone() }).unwrap();
            assert!(world.class_map.iter().all(|&c| c == world.class_map[0]));
        }
    }

    #[test]
    fn invalid_configs_rejected() {
        for cfg in [
            WorldConfig { classes: 1, ..WorldConfig::default() },
            WorldConfig { height: 4, ..WorldConfig::default() },
            WorldConfig { cloud_rate: 1.5, ..WorldConfig::default() },
            WorldConfig { patch_count: 0, ..WorldConfig::default() },
        ] {
            assert!(matches!(generate_world(&cfg), Err(S4Error::InvalidConfig(_))));
        }
    }

    #[test]
    fn cloud_free_and_fully_clouded() {
        let world = generate_world(&quiet()).unwrap();
        let (_, mask) = render_optical(&world, &quiet()).unwrap();
        assert!(mask.iter().all(|&m| !m));

        let cfg = WorldConfig {
            cloud_rate: 1.0,
            cloud_radius_min: 2.0,
            cloud_radius_max: 2.0,
            ..WorldConfig::default()
        };
        let world = generate_world(&cfg).unwrap();
        let (s, mask) = render_optical(&world, &cfg).unwrap();
        let ratio = cloud_cover_ratio(&mask, [s.frames(), s.height(), s.width()]).unwrap();
        assert_eq!(ratio, 1.0);
    }

    #[test]
    fn same_class_pixels_share_profiles() {
        let cfg = quiet();
        let world = generate_world(&cfg).unwrap();
        let (opt, _) = render_optical(&world, &cfg).unwrap();
        let radar = render_radar(&world, &cfg).unwrap();
        let (h, w) = (cfg.height, cfg.width);
        let profile = |s: &ModalitySeries, px: usize| -> Vec<f32> {
            let [t, c, _, _] = s.dims();
            (0..t * c).map(|tc| s.data()[tc * h * w + px]).collect()
        };
        for a in 0..h * w {
            for b in (a + 1)..h * w {
                let same = world.class_map[a] == world.class_map[b];
                assert_eq!(profile(&opt, a) == profile(&opt, b), same, "optical {a} {b}");
                assert_eq!(profile(&radar, a) == profile(&radar, b), same, "radar {a} {b}");
            }
        }
    }

    #[test]
    fn radar_timestamps_interleave_optical() {
        let cfg = WorldConfig::default();
        let world = generate_world(&cfg).unwrap();
        let radar = render_radar(&world, &cfg).unwrap();
        let (opt, _) = render_optical(&world, &cfg).unwrap();
        assert_eq!(radar.frames(), cfg.radar_frames);
        assert!(radar.timestamps().windows(2).all(|p| p[1] > p[0]));
        assert!(radar.timestamps().iter().all(|t| !opt.timestamps().contains(t)));
    }

    #[test]
    fn radar_tracks_optical_green_without_noise() {
        let cfg = quiet();
        let world = generate_world(&cfg).unwrap();
        let (opt, _) = render_optical(&world, &cfg).unwrap();
        let radar = render_radar(&world, &cfg).unwrap();
        let aligned = nearest_timestamp_align(&radar, &opt).unwrap();
        let (h, w) = (cfg.height, cfg.width);
        let px = (0..h * w).find(|&p| world.class_map[p] != 0).expect("a vegetated pixel");
        let t = aligned.frames();
        let green: Vec<f64> = (0..t).map(|ti| aligned.optical.data()[(ti * 3 + 1) * h * w + px] as f64).collect();
        let r0: Vec<f64> = (0..t).map(|ti| aligned.radar.data()[(ti * 2) * h * w + px] as f64).collect();
        let corr = pearson(&green, &r0);
        assert!(corr > 0.9, "correlation {corr}");
    }

    fn pearson(a: &[f64], b: &[f64]) -> f64 {
        let n = a.len() as f64;
        let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
        let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
        let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
        let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
        cov / (va * vb).sqrt()
    }

    #[test]
    fn radar_is_independent_of_cloud_rate() {
        let a = WorldConfig { cloud_rate: 0.0, ..WorldConfig::default() };
        let b = WorldConfig { cloud_rate: 0.9, ..WorldConfig::default() };
        let sa = generate_sample(&a, 3).unwrap();
        let sb = generate_sample(&b, 3).unwrap();
        assert_eq!(sa.radar, sb.radar);
        assert_eq!(sa.label, sb.label);
        assert_ne!(sa.cloud_mask, sb.cloud_mask);
    }

    #[test]
    fn split_counts() {
        assert_eq!(split_sizes(10), (7, 2, 1));
        assert_eq!(split_sizes(1), (1, 0, 0));
        let (tr, va, te) = split_sizes(64);
        assert_eq!(tr + va + te, 64);
    }
}
