//! Domain types for paired radar/optical image time series, temporal
//! alignment by nearest timestamp, per-channel normalization and cloud
//! statistics.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Result, S4Error};

/// Label value for pixels excluded from losses and metrics.
pub const IGNORE_LABEL: i32 = -1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Radar,
    Optical,
}

impl Modality {
    pub fn default_channels(self) -> usize {
        match self {
            Modality::Radar => 2,
            Modality::Optical => 3,
        }
    }

    pub fn other(self) -> Modality {
        match self {
            Modality::Radar => Modality::Optical,
            Modality::Optical => Modality::Radar,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Modality::Radar => "radar",
            Modality::Optical => "optical",
        }
    }
}

impl std::str::FromStr for Modality {
    type Err = S4Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "radar" => Ok(Modality::Radar),
            "optical" => Ok(Modality::Optical),
            other => Err(S4Error::InvalidConfig(format!("unknown modality `{other}`"))),
        }
    }
}

/// One modality's image time series, stored C-order as `[T, C, H, W]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ModalitySeries {
    modality: Modality,
    dims: [usize; 4],
    timestamps: Vec<i64>,
    data: Vec<f32>,
}

impl ModalitySeries {
    /// Builds a series, checking every invariant: nonzero dims, strictly
    /// increasing timestamps (one per frame), finite values.
    pub fn new(
        modality: Modality,
        dims: [usize; 4],
        timestamps: Vec<i64>,
        data: Vec<f32>,
    ) -> Result<Self> {
        let [t, c, h, w] = dims;
        if t == 0 || c == 0 || h == 0 || w == 0 {
            return Err(S4Error::EmptySeries(format!(
                "{} series has dims {dims:?}",
                modality.as_str()
            )));
        }
        if timestamps.len() != t {
            return Err(S4Error::InvalidSeries(format!(
                "{} timestamps has length {} but T = {t}",
                modality.as_str(),
                timestamps.len()
            )));
        }
        if timestamps.windows(2).any(|p| p[1] <= p[0]) {
            return Err(S4Error::InvalidSeries(format!(
                "{} timestamps are not strictly increasing",
                modality.as_str()
            )));
        }
        if data.len() != t * c * h * w {
            return Err(S4Error::ShapeMismatch(format!(
                "{} data has {} values, dims {dims:?} need {}",
                modality.as_str(),
                data.len(),
                t * c * h * w
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(S4Error::InvalidSeries(format!(
                "{} data has a non-finite value at flat index {i}",
                modality.as_str()
            )));
        }
        Ok(Self {
            modality,
            dims,
            timestamps,
            data,
        })
    }

    pub fn modality(&self) -> Modality {
        self.modality
    }

    /// `[T, C, H, W]`
    pub fn dims(&self) -> [usize; 4] {
        self.dims
    }

    pub fn frames(&self) -> usize {
        self.dims[0]
    }

    pub fn channels(&self) -> usize {
        self.dims[1]
    }

    pub fn height(&self) -> usize {
        self.dims[2]
    }

    pub fn width(&self) -> usize {
        self.dims[3]
    }

    pub fn timestamps(&self) -> &[i64] {
        &self.timestamps
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    fn frame_len(&self) -> usize {
        self.dims[1] * self.dims[2] * self.dims[3]
    }

    pub fn frame(&self, t: usize) -> &[f32] {
        let n = self.frame_len();
        &self.data[t * n..(t + 1) * n]
    }

    /// New series made of the given frames in order. Frames may repeat;
    /// timestamps are taken from the anchor the frames were matched to, so
    /// the result stays strictly increasing.
    fn reindexed(&self, frames: &[usize], timestamps: Vec<i64>) -> Self {
        let mut data = Vec::with_capacity(frames.len() * self.frame_len());
        for &f in frames {
            data.extend_from_slice(self.frame(f));
        }
        Self {
            modality: self.modality,
            dims: [frames.len(), self.dims[1], self.dims[2], self.dims[3]],
            timestamps,
            data,
        }
    }
}

/// Spatially aligned radar and optical series for one location.
#[derive(Debug, Clone, PartialEq)]
pub struct SitsPair {
    pub location_id: String,
    pub radar: ModalitySeries,
    pub optical: ModalitySeries,
    /// `[H, W]`, values in `0..classes` or [`IGNORE_LABEL`].
    pub label: Option<Vec<i32>>,
    /// `[T_optical, H, W]`, true where the optical pixel is clouded.
    pub cloud_mask: Option<Vec<bool>>,
}

impl SitsPair {
    pub fn height(&self) -> usize {
        self.radar.height()
    }

    pub fn width(&self) -> usize {
        self.radar.width()
    }

    pub fn series(&self, modality: Modality) -> &ModalitySeries {
        match modality {
            Modality::Radar => &self.radar,
            Modality::Optical => &self.optical,
        }
    }

    /// Checks the cross-series invariants. `classes` bounds the label values
    /// when given.
    pub fn validate(&self, classes: Option<usize>) -> Result<()> {
        if self.radar.modality() != Modality::Radar || self.optical.modality() != Modality::Optical
        {
            return Err(S4Error::InvalidSeries(format!(
                "{}: series modalities are swapped",
                self.location_id
            )));
        }
        let (h, w) = (self.radar.height(), self.radar.width());
        if self.optical.height() != h || self.optical.width() != w {
            return Err(S4Error::ShapeMismatch(format!(
                "{}: radar is {h}x{w}, optical is {}x{}",
                self.location_id,
                self.optical.height(),
                self.optical.width()
            )));
        }
        if let Some(label) = &self.label {
            if label.len() != h * w {
                return Err(S4Error::ShapeMismatch(format!(
                    "{}: label has {} pixels, expected {}",
                    self.location_id,
                    label.len(),
                    h * w
                )));
            }
            for &v in label {
                let out_of_range = match classes {
                    Some(k) => v != IGNORE_LABEL && (v < 0 || v as usize >= k),
                    None => v != IGNORE_LABEL && v < 0,
                };
                if out_of_range {
                    return Err(S4Error::LabelOutOfRange {
                        value: v,
                        classes: classes.unwrap_or(0),
                    });
                }
            }
        }
        if let Some(mask) = &self.cloud_mask {
            let expected = self.optical.frames() * h * w;
            if mask.len() != expected {
                return Err(S4Error::ShapeMismatch(format!(
                    "{}: cloud mask has {} entries, expected {expected}",
                    self.location_id,
                    mask.len()
                )));
            }
        }
        Ok(())
    }
}

/// Result of nearest-timestamp alignment: both series have `T_min` frames.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignedPair {
    pub radar: ModalitySeries,
    pub optical: ModalitySeries,
    /// `(kept_frame_index, matched_frame_index)` per anchor frame.
    pub pairing: Vec<(usize, usize)>,
    pub anchor: Modality,
}

impl AlignedPair {
    pub fn frames(&self) -> usize {
        self.pairing.len()
    }

    pub fn series(&self, modality: Modality) -> &ModalitySeries {
        match modality {
            Modality::Radar => &self.radar,
            Modality::Optical => &self.optical,
        }
    }

    /// Frame indices of the original optical series that ended up in the
    /// aligned optical series.
    pub fn optical_frames(&self) -> Vec<usize> {
        match self.anchor {
            Modality::Optical => self.pairing.iter().map(|p| p.0).collect(),
            Modality::Radar => self.pairing.iter().map(|p| p.1).collect(),
        }
    }
}

/// Index of the frame in `times` closest to `target`; the earlier frame wins
/// ties. `times` must be nonempty and strictly increasing.
pub fn nearest_frame(times: &[i64], target: i64) -> usize {
    let after = times.partition_point(|&t| t < target);
    if after == 0 {
        return 0;
    }
    if after == times.len() {
        return times.len() - 1;
    }
    let before = after - 1;
    let d_before = target.abs_diff(times[before]);
    let d_after = times[after].abs_diff(target);
    if d_after < d_before {
        after
    } else {
        before
    }
}

/// Anchor modality and `(anchor frame, matched frame)` pairs for two
/// sorted timestamp lists; see [`nearest_timestamp_align`].
pub fn align_indices(radar: &[i64], optical: &[i64]) -> (Modality, Vec<(usize, usize)>) {
    let (anchor, kept, other) = if radar.len() <= optical.len() {
        (Modality::Radar, radar, optical)
    } else {
        (Modality::Optical, optical, radar)
    };
    let pairing = kept
        .iter()
        .enumerate()
        .map(|(i, &t)| (i, nearest_frame(other, t)))
        .collect();
    (anchor, pairing)
}

/// Subsets the longer series so that every frame of the shorter (anchor)
/// series is paired with the frame of the other modality captured closest
/// in time. The anchor is returned unchanged; radar anchors when lengths
/// are equal. Frames of the longer series may be selected more than once.
pub fn nearest_timestamp_align(
    radar: &ModalitySeries,
    optical: &ModalitySeries,
) -> Result<AlignedPair> {
    if radar.frames() == 0 || optical.frames() == 0 {
        return Err(S4Error::EmptySeries("cannot align an empty series".into()));
    }
    if radar.height() != optical.height() || radar.width() != optical.width() {
        return Err(S4Error::ShapeMismatch(format!(
            "radar is {}x{}, optical is {}x{}",
            radar.height(),
            radar.width(),
            optical.height(),
            optical.width()
        )));
    }
    let (anchor, pairing) = align_indices(radar.timestamps(), optical.timestamps());
    let (kept, other) = match anchor {
        Modality::Radar => (radar, optical),
        Modality::Optical => (optical, radar),
    };
    let matched: Vec<usize> = pairing.iter().map(|p| p.1).collect();
    let resampled = other.reindexed(&matched, kept.timestamps().to_vec());
    let (radar, optical) = match anchor {
        Modality::Radar => (kept.clone(), resampled),
        Modality::Optical => (resampled, kept.clone()),
    };
    Ok(AlignedPair {
        radar,
        optical,
        pairing,
        anchor,
    })
}

/// Fraction of clouded pixels over all frames. `dims` is `[T, H, W]`.
pub fn cloud_cover_ratio(mask: &[bool], dims: [usize; 3]) -> Result<f64> {
    let total = dims.iter().product::<usize>();
    if total == 0 {
        return Err(S4Error::EmptySeries(format!("cloud mask dims {dims:?}")));
    }
    if mask.len() != total {
        return Err(S4Error::ShapeMismatch(format!(
            "cloud mask has {} entries, dims {dims:?} need {total}",
            mask.len()
        )));
    }
    let clouded = mask.iter().filter(|&&c| c).count();
    Ok(clouded as f64 / total as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// Per-modality, per-channel z-score statistics.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct NormalizationStats {
    pub modalities: BTreeMap<Modality, ChannelStats>,
}

impl NormalizationStats {
    pub fn get(&self, modality: Modality) -> Option<&ChannelStats> {
        self.modalities.get(&modality)
    }
}

/// Population mean and std per channel over every pixel and frame of the
/// given series, grouped by modality. Zero-variance channels get std 1.
pub fn fit_normalization<'a, I>(samples: I) -> Result<NormalizationStats>
where
    I: IntoIterator<Item = &'a ModalitySeries>,
{
    let mut grouped: BTreeMap<Modality, Vec<&ModalitySeries>> = BTreeMap::new();
    for s in samples {
        grouped.entry(s.modality()).or_default().push(s);
    }
    if grouped.is_empty() {
        return Err(S4Error::EmptyDataset);
    }
    let mut stats = NormalizationStats::default();
    for (modality, series) in grouped {
        let c = series[0].channels();
        if let Some(bad) = series.iter().find(|s| s.channels() != c) {
            return Err(S4Error::ChannelMismatch {
                expected: c,
                got: bad.channels(),
            });
        }
        let mut sum = vec![0.0f64; c];
        let mut count = vec![0usize; c];
        for s in &series {
            for_each_channel(s, |ch, v| {
                sum[ch] += v as f64;
                count[ch] += 1;
            });
        }
        let mean: Vec<f64> = sum.iter().zip(&count).map(|(s, &n)| s / n as f64).collect();
        let mut sq = vec![0.0f64; c];
        for s in &series {
            for_each_channel(s, |ch, v| {
                let d = v as f64 - mean[ch];
                sq[ch] += d * d;
            });
        }
        let std = sq
            .iter()
            .zip(&count)
            .map(|(s, &n)| {
                let sd = (s / n as f64).sqrt();
                if sd > 0.0 {
                    sd
                } else {
                    1.0
                }
            })
            .collect();
        stats.modalities.insert(modality, ChannelStats { mean, std });
    }
    Ok(stats)
}

fn for_each_channel(s: &ModalitySeries, mut f: impl FnMut(usize, f32)) {
    let [t, c, h, w] = s.dims();
    let plane = h * w;
    for ti in 0..t {
        for ch in 0..c {
            let start = (ti * c + ch) * plane;
            for &v in &s.data()[start..start + plane] {
                f(ch, v);
            }
        }
    }
}

/// `(x - mean) / std` per channel; timestamps are kept.
pub fn normalize(series: &ModalitySeries, stats: &NormalizationStats) -> Result<ModalitySeries> {
    let channel_stats = stats
        .get(series.modality())
        .ok_or(S4Error::ChannelMismatch {
            expected: 0,
            got: series.channels(),
        })?;
    let [t, c, h, w] = series.dims();
    if channel_stats.mean.len() != c {
        return Err(S4Error::ChannelMismatch {
            expected: channel_stats.mean.len(),
            got: c,
        });
    }
    let plane = h * w;
    let mut data = series.data().to_vec();
    for ti in 0..t {
        for ch in 0..c {
            let (m, sd) = (channel_stats.mean[ch], channel_stats.std[ch]);
            let start = (ti * c + ch) * plane;
            for v in &mut data[start..start + plane] {
                *v = ((*v as f64 - m) / sd) as f32;
            }
        }
    }
    ModalitySeries::new(series.modality(), series.dims(), series.timestamps().to_vec(), data)
}
