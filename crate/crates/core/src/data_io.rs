//! On-disk sample archives and dataset manifests.
//!
//! A sample archive is a directory holding `header.json` plus raw
//! little-endian blobs: `radar.bin` and `optical.bin` (float32, C order
//! `[T, C, H, W]`), optionally `label.bin` (int32 `[H, W]`) and `cloud.bin`
//! (uint8 `[T_optical, H, W]`, 0 or 1). See `docs/format.md`.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Result, S4Error};
use crate::sits::{Modality, ModalitySeries, SitsPair};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SeriesHeader {
    /// `[T, C, H, W]`
    pub shape: [usize; 4],
    pub dtype: String,
    pub timestamps: Vec<i64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleHeader {
    pub schema_version: u32,
    pub location_id: String,
    pub radar: SeriesHeader,
    pub optical: SeriesHeader,
    pub has_label: bool,
    pub has_cloud_mask: bool,
}

fn series_header(s: &ModalitySeries) -> SeriesHeader {
    SeriesHeader {
        shape: s.dims(),
        dtype: "float32".into(),
        timestamps: s.timestamps().to_vec(),
    }
}

pub fn encode_f32(values: &[f32]) -> Vec<u8> {
    values.iter().flat_map(|v| v.to_le_bytes()).collect()
}

pub fn decode_f32(bytes: &[u8]) -> Vec<f32> {
    bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect()
}

fn encode_i32(values: &[i32]) -> Vec<u8> {
    values.iter().flat_map(|v| v.to_le_bytes()).collect()
}

/// Writes `pair` as an archive directory at `dir` (created if missing).
/// Identical input gives identical bytes.
pub fn write_sample(pair: &SitsPair, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let header = SampleHeader {
        schema_version: SCHEMA_VERSION,
        location_id: pair.location_id.clone(),
        radar: series_header(&pair.radar),
        optical: series_header(&pair.optical),
        has_label: pair.label.is_some(),
        has_cloud_mask: pair.cloud_mask.is_some(),
    };
    let mut json = serde_json::to_vec_pretty(&header)?;
    json.push(b'\n');
    fs::write(dir.join("header.json"), json)?;
    fs::write(dir.join("radar.bin"), encode_f32(pair.radar.data()))?;
    fs::write(dir.join("optical.bin"), encode_f32(pair.optical.data()))?;
    if let Some(label) = &pair.label {
        fs::write(dir.join("label.bin"), encode_i32(label))?;
    }
    if let Some(mask) = &pair.cloud_mask {
        let bytes: Vec<u8> = mask.iter().map(|&m| m as u8).collect();
        fs::write(dir.join("cloud.bin"), bytes)?;
    }
    Ok(())
}

fn read_blob(dir: &Path, name: &str, expected_len: usize) -> Result<Vec<u8>> {
    let path = dir.join(name);
    let bytes = fs::read(&path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => S4Error::CorruptArchive(format!("{} is missing", path.display())),
        _ => S4Error::Io(e),
    })?;
    if bytes.len() != expected_len {
        return Err(S4Error::CorruptArchive(format!(
            "{} has {} bytes, header implies {expected_len}",
            path.display(),
            bytes.len()
        )));
    }
    Ok(bytes)
}

fn read_series(dir: &Path, name: &str, modality: Modality, h: &SeriesHeader) -> Result<ModalitySeries> {
    if h.dtype != "float32" {
        return Err(S4Error::CorruptArchive(format!("{name}: unsupported dtype {}", h.dtype)));
    }
    let count: usize = h.shape.iter().product();
    let bytes = read_blob(dir, name, count * 4)?;
    ModalitySeries::new(modality, h.shape, h.timestamps.clone(), decode_f32(&bytes))
        .map_err(|e| S4Error::CorruptArchive(format!("{name}: {e}")))
}

/// Reads and validates an archive directory.
pub fn read_sample(dir: &Path) -> Result<SitsPair> {
    let header_path = dir.join("header.json");
    if !header_path.exists() {
        return Err(S4Error::MissingFile(header_path));
    }
    let raw: serde_json::Value = serde_json::from_slice(&fs::read(&header_path)?)
        .map_err(|e| S4Error::CorruptArchive(format!("header.json: {e}")))?;
    let version = raw.get("schema_version").and_then(|v| v.as_u64()).unwrap_or(0) as u32;
    if version != SCHEMA_VERSION {
        return Err(S4Error::UnsupportedSchema(version));
    }
    let header: SampleHeader = serde_json::from_value(raw)
        .map_err(|e| S4Error::CorruptArchive(format!("header.json: {e}")))?;
    let radar = read_series(dir, "radar.bin", Modality::Radar, &header.radar)?;
    let optical = read_series(dir, "optical.bin", Modality::Optical, &header.optical)?;
    let [t_o, _, h, w] = header.optical.shape;
    let label = if header.has_label {
        let bytes = read_blob(dir, "label.bin", h * w * 4)?;
        Some(
            bytes
                .chunks_exact(4)
                .map(|c| i32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect(),
        )
    } else {
        None
    };
    let cloud_mask = if header.has_cloud_mask {
        let bytes = read_blob(dir, "cloud.bin", t_o * h * w)?;
        if let Some(b) = bytes.iter().find(|&&b| b > 1) {
            return Err(S4Error::CorruptArchive(format!("cloud.bin holds byte {b}")));
        }
        Some(bytes.into_iter().map(|b| b == 1).collect())
    } else {
        None
    };
    let pair = SitsPair {
        location_id: header.location_id,
        radar,
        optical,
        label,
        cloud_mask,
    };
    pair.validate(None)
        .map_err(|e| S4Error::CorruptArchive(e.to_string()))?;
    Ok(pair)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl std::str::FromStr for Split {
    type Err = S4Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(S4Error::InvalidConfig(format!("unknown split `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub sample_id: String,
    pub relative_path: String,
    pub split: Split,
    pub has_label: bool,
}

/// Dataset listing; `root` is the directory entry paths are relative to.
#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub root: PathBuf,
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    /// Rejects duplicate sample ids.
    pub fn new(root: PathBuf, entries: Vec<ManifestEntry>) -> Result<Self> {
        let mut seen = HashSet::new();
        for e in &entries {
            if !seen.insert(e.sample_id.as_str()) {
                return Err(S4Error::InvalidManifest(format!(
                    "duplicate sample_id `{}`",
                    e.sample_id
                )));
            }
        }
        Ok(Self { root, entries })
    }

    pub fn split(&self, split: Split) -> Vec<&ManifestEntry> {
        self.entries.iter().filter(|e| e.split == split).collect()
    }

    /// Entries of `split` in an order that depends only on `(seed, epoch)`.
    pub fn iterate(&self, split: Split, seed: u64, epoch: u64) -> Vec<&ManifestEntry> {
        let mut entries = self.split(split);
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x2545_F491_4F6C_DD1D) ^ epoch);
        entries.shuffle(&mut rng);
        entries
    }

    pub fn path_of(&self, entry: &ManifestEntry) -> PathBuf {
        self.root.join(&entry.relative_path)
    }

    /// Reads every sample of `split`, in manifest order.
    pub fn load_split(&self, split: Split) -> Result<Vec<SitsPair>> {
        self.split(split)
            .par_iter()
            .map(|e| read_sample(&self.path_of(e)))
            .collect()
    }
}

pub fn write_manifest(manifest: &Manifest, path: &Path) -> Result<()> {
    let mut json = serde_json::to_vec_pretty(&manifest.entries)?;
    json.push(b'\n');
    fs::write(path, json)?;
    Ok(())
}

/// Loads a manifest, validating ids and that every archive exists.
pub fn load_manifest(path: &Path) -> Result<Manifest> {
    if !path.exists() {
        return Err(S4Error::MissingFile(path.to_path_buf()));
    }
    let entries: Vec<ManifestEntry> = serde_json::from_slice(&fs::read(path)?)?;
    let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let manifest = Manifest::new(root, entries)?;
    for e in &manifest.entries {
        let p = manifest.path_of(e);
        if !p.exists() {
            return Err(S4Error::MissingFile(p));
        }
    }
    Ok(manifest)
}

/// Accepts either a manifest file or a dataset directory containing
/// `manifest.json`.
pub fn open_dataset(path: &Path) -> Result<Manifest> {
    if path.is_dir() {
        load_manifest(&path.join("manifest.json"))
    } else {
        load_manifest(path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pair() -> SitsPair {
        let radar = ModalitySeries::new(Modality::Radar, [2, 2, 2, 2], vec![1, 5], (0..16).map(|v| v as f32 * 0.5).collect()).unwrap();
        let optical = ModalitySeries::new(Modality::Optical, [1, 3, 2, 2], vec![3], (0..12).map(|v| -(v as f32)).collect()).unwrap();
        SitsPair {
            location_id: "loc-a".into(),
            radar,
            optical,
            label: Some(vec![0, 1, -1, 2]),
            cloud_mask: Some(vec![true, false, false, true]),
        }
    }

    #[test]
    fn round_trip_and_determinism() {
        let dir = tempfile::tempdir().unwrap();
        let p = pair();
        write_sample(&p, dir.path()).unwrap();
        assert_eq!(read_sample(dir.path()).unwrap(), p);
        let first = fs::read(dir.path().join("radar.bin")).unwrap();
        let header = fs::read(dir.path().join("header.json")).unwrap();
        write_sample(&p, dir.path()).unwrap();
        assert_eq!(fs::read(dir.path().join("radar.bin")).unwrap(), first);
        assert_eq!(fs::read(dir.path().join("header.json")).unwrap(), header);
        assert_eq!(first.len(), 2 * 2 * 2 * 2 * 4);
    }

    #[test]
    fn truncated_blob_is_corrupt() {
        let dir = tempfile::tempdir().unwrap();
        write_sample(&pair(), dir.path()).unwrap();
        let path = dir.path().join("optical.bin");
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(read_sample(dir.path()), Err(S4Error::CorruptArchive(_))));
    }

    #[test]
    fn header_shape_disagreement_is_corrupt() {
        let dir = tempfile::tempdir().unwrap();
        write_sample(&pair(), dir.path()).unwrap();
        let path = dir.path().join("header.json");
        let text = fs::read_to_string(&path).unwrap();
        fs::write(&path, text.replacen("\"has_label\": true", "\"has_label\": true ", 1)).unwrap();
        assert!(read_sample(dir.path()).is_ok());
        let mut h: SampleHeader = serde_json::from_str(&text).unwrap();
        h.radar.shape = [2, 2, 2, 1];
        fs::write(&path, serde_json::to_vec(&h).unwrap()).unwrap();
        assert!(matches!(read_sample(dir.path()), Err(S4Error::CorruptArchive(_))));
    }

    #[test]
    fn unknown_schema_rejected() {
        let dir = tempfile::tempdir().unwrap();
        write_sample(&pair(), dir.path()).unwrap();
        let path = dir.path().join("header.json");
        let text = fs::read_to_string(&path).unwrap().replace("\"schema_version\": 1", "\"schema_version\": 9");
        fs::write(&path, text).unwrap();
        assert!(matches!(read_sample(dir.path()), Err(S4Error::UnsupportedSchema(9))));
    }

    #[test]
    fn manifest_validation_and_iteration() {
        let entry = |id: &str, split| ManifestEntry {
            sample_id: id.into(),
            relative_path: format!("samples/{id}"),
            split,
            has_label: true,
        };
        let dup = Manifest::new(PathBuf::new(), vec![entry("a", Split::Train), entry("a", Split::Test)]);
        assert!(matches!(dup, Err(S4Error::InvalidManifest(_))));

        let entries: Vec<_> = (0..20)
            .map(|i| entry(&format!("s{i}"), if i % 4 == 0 { Split::Test } else { Split::Train }))
            .collect();
        let m = Manifest::new(PathBuf::new(), entries).unwrap();
        assert!(m.split(Split::Test).iter().all(|e| e.split == Split::Test));
        assert_eq!(m.split(Split::Test).len(), 5);
        let a: Vec<_> = m.iterate(Split::Train, 7, 1).iter().map(|e| e.sample_id.clone()).collect();
        let b: Vec<_> = m.iterate(Split::Train, 7, 1).iter().map(|e| e.sample_id.clone()).collect();
        let c: Vec<_> = m.iterate(Split::Train, 7, 2).iter().map(|e| e.sample_id.clone()).collect();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert!(matches!(
            load_manifest(Path::new("/nonexistent/manifest.json")),
            Err(S4Error::MissingFile(_))
        ));
    }
}
