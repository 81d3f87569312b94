//! Portable slice datasets: a directory with `manifest.json` and one raw
//! little-endian `f32` row-major file per slice.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Contrast, DataError, FieldStrength, IntensityRange, Slice, Volume};
use crate::io_util::{f32s_to_le, le_to_f32s, sha256_hex, write_atomic};
use crate::tensor::Tensor;

pub const DATASET_FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
const DTYPE: &str = "f32le";

/// Dataset-level metadata shared by every slice.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub height: usize,
    pub width: usize,
    pub field_strength: FieldStrength,
    pub contrast: Contrast,
    pub normalization: IntensityRange,
    pub seed: u64,
    /// Free-form origin record (e.g. generator checkpoint and source hashes).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provenance: Option<serde_json::Value>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct EntryFile {
    volume_id: String,
    slice_index: usize,
    file: String,
    sha256: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestFile {
    format_version: u32,
    height: usize,
    width: usize,
    dtype: String,
    field_strength: FieldStrength,
    contrast: Contrast,
    normalization: IntensityRange,
    seed: u64,
    entries: Vec<EntryFile>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    provenance: Option<serde_json::Value>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SliceDataset {
    pub meta: DatasetMeta,
    pub slices: Vec<Slice>,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn entry_file(k: usize) -> String {
    format!("slice_{k:05}.f32")
}

impl SliceDataset {
    pub fn new(meta: DatasetMeta, slices: Vec<Slice>) -> Result<Self, DataError> {
        for s in &slices {
            if (s.height, s.width) != (meta.height, meta.width) {
                return Err(DataError::Invalid(format!(
                    "slice {} is {}x{}, dataset is {}x{}",
                    s.key(),
                    s.height,
                    s.width,
                    meta.height,
                    meta.width
                )));
            }
            if s.intensity_range != meta.normalization {
                return Err(DataError::Invalid(format!(
                    "slice {} is tagged {:?}, dataset is {:?}",
                    s.key(),
                    s.intensity_range,
                    meta.normalization
                )));
            }
            s.check_range()?;
        }
        Ok(Self { meta, slices })
    }

    /// Concatenates volumes in order.
    pub fn from_volumes(volumes: &[Volume], seed: u64) -> Result<Self, DataError> {
        let first = volumes
            .first()
            .and_then(|v| v.slices.first())
            .ok_or_else(|| DataError::Invalid("no slices to build a dataset from".into()))?;
        let meta = DatasetMeta {
            height: first.height,
            width: first.width,
            field_strength: volumes[0].field_strength,
            contrast: first.contrast,
            normalization: first.intensity_range,
            seed,
            provenance: None,
        };
        let slices = volumes.iter().flat_map(|v| v.slices.iter().cloned()).collect();
        Self::new(meta, slices)
    }

    pub fn len(&self) -> usize {
        self.slices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slices.is_empty()
    }

    /// Signed-range `[N, 1, H, W]` batch of the given slices.
    pub fn batch(&self, indices: &[usize]) -> Result<Tensor<f32>, DataError> {
        let mut picked = Vec::with_capacity(indices.len());
        for &i in indices {
            picked.push(
                self.slices
                    .get(i)
                    .ok_or_else(|| DataError::Invalid(format!("slice index {i} out of range")))?,
            );
        }
        super::stack_signed(picked)
    }

    fn manifest(&self) -> (ManifestFile, Vec<Vec<u8>>) {
        let mut entries = Vec::with_capacity(self.slices.len());
        let mut payloads = Vec::with_capacity(self.slices.len());
        for (k, s) in self.slices.iter().enumerate() {
            let bytes = f32s_to_le(&s.pixels);
            entries.push(EntryFile {
                volume_id: s.volume_id.clone(),
                slice_index: s.slice_index,
                file: entry_file(k),
                sha256: sha256_hex(&bytes),
            });
            payloads.push(bytes);
        }
        let m = ManifestFile {
            format_version: DATASET_FORMAT_VERSION,
            height: self.meta.height,
            width: self.meta.width,
            dtype: DTYPE.into(),
            field_strength: self.meta.field_strength,
            contrast: self.meta.contrast,
            normalization: self.meta.normalization,
            seed: self.meta.seed,
            entries,
            provenance: self.meta.provenance.clone(),
        };
        (m, payloads)
    }

    fn manifest_bytes(m: &ManifestFile) -> Vec<u8> {
        let mut bytes = serde_json::to_vec_pretty(m).expect("manifest serialises");
        bytes.push(b'\n');
        bytes
    }

    /// SHA-256 of the manifest this dataset saves, which pins every slice via
    /// its per-entry checksum.
    pub fn content_hash(&self) -> String {
        sha256_hex(&Self::manifest_bytes(&self.manifest().0))
    }

    /// Writes slice files then the manifest, each atomically. Returns the
    /// manifest SHA-256.
    pub fn save(&self, dir: &Path) -> Result<String, DataError> {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        let (m, payloads) = self.manifest();
        for (e, bytes) in m.entries.iter().zip(&payloads) {
            let path = dir.join(&e.file);
            write_atomic(&path, bytes).map_err(io_err(&path))?;
        }
        let bytes = Self::manifest_bytes(&m);
        let path = dir.join(MANIFEST_FILE);
        write_atomic(&path, &bytes).map_err(io_err(&path))?;
        Ok(sha256_hex(&bytes))
    }

    pub fn load(dir: &Path) -> Result<Self, DataError> {
        let mpath = dir.join(MANIFEST_FILE);
        let text = fs::read(&mpath).map_err(io_err(&mpath))?;
        let raw: serde_json::Value = serde_json::from_slice(&text).map_err(|e| DataError::Manifest {
            path: mpath.clone(),
            message: e.to_string(),
        })?;
        let found = raw.get("format_version").and_then(|v| v.as_u64()).unwrap_or(0) as u32;
        if found != DATASET_FORMAT_VERSION {
            return Err(DataError::Version {
                found,
                expected: DATASET_FORMAT_VERSION,
            });
        }
        let m: ManifestFile = serde_json::from_value(raw).map_err(|e| DataError::Manifest {
            path: mpath.clone(),
            message: e.to_string(),
        })?;
        if m.dtype != DTYPE {
            return Err(DataError::Manifest {
                path: mpath,
                message: format!("dtype {:?} is not {DTYPE:?}", m.dtype),
            });
        }
        let expected = (m.height * m.width * 4) as u64;
        let mut slices = Vec::with_capacity(m.entries.len());
        for e in &m.entries {
            let path: PathBuf = dir.join(&e.file);
            let entry = format!("{}#{}", e.volume_id, e.slice_index);
            if !path.is_file() {
                return Err(DataError::MissingEntry { entry, path });
            }
            let bytes = fs::read(&path).map_err(io_err(&path))?;
            let found = bytes.len() as u64;
            let intact = sha256_hex(&bytes) == e.sha256;
            match (intact, found.cmp(&expected)) {
                (true, std::cmp::Ordering::Equal) => {}
                (true, _) => return Err(DataError::DimensionMismatch { entry, path, expected, found }),
                (false, std::cmp::Ordering::Less) => return Err(DataError::Truncated { entry, path, expected, found }),
                (false, _) => return Err(DataError::ChecksumMismatch { entry, path }),
            }
            slices.push(Slice::new(
                m.height,
                m.width,
                le_to_f32s(&bytes),
                m.normalization,
                m.contrast,
                e.volume_id.clone(),
                e.slice_index,
            )?);
        }
        let meta = DatasetMeta {
            height: m.height,
            width: m.width,
            field_strength: m.field_strength,
            contrast: m.contrast,
            normalization: m.normalization,
            seed: m.seed,
            provenance: m.provenance,
        };
        Self::new(meta, slices)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_phantom_volume, PhantomConfig};

    fn small() -> SliceDataset {
        let cfg = PhantomConfig {
            image_size: 16,
            slices_per_volume: 3,
            ..Default::default()
        };
        let vols: Vec<_> = (0..2).map(|v| generate_phantom_volume(&cfg, v).unwrap()).collect();
        SliceDataset::from_volumes(&vols, cfg.seed).unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let ds = small();
        let dir = tempfile::tempdir().unwrap();
        let sha = ds.save(dir.path()).unwrap();
        assert_eq!(sha, ds.content_hash());
        let back = SliceDataset::load(dir.path()).unwrap();
        assert_eq!(back, ds);
    }

    #[test]
    fn wrong_height_names_the_entry() {
        let ds = small();
        let dir = tempfile::tempdir().unwrap();
        ds.save(dir.path()).unwrap();
        let mpath = dir.path().join(MANIFEST_FILE);
        let mut m: serde_json::Value = serde_json::from_slice(&fs::read(&mpath).unwrap()).unwrap();
        m["height"] = 8.into();
        fs::write(&mpath, serde_json::to_vec(&m).unwrap()).unwrap();
        match SliceDataset::load(dir.path()) {
            Err(DataError::DimensionMismatch { entry, .. }) => assert_eq!(entry, "vol0000#0"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn truncated_file_reports_path() {
        let ds = small();
        let dir = tempfile::tempdir().unwrap();
        ds.save(dir.path()).unwrap();
        let victim = dir.path().join(entry_file(4));
        let bytes = fs::read(&victim).unwrap();
        fs::write(&victim, &bytes[..bytes.len() - 7]).unwrap();
        match SliceDataset::load(dir.path()) {
            Err(e @ DataError::Truncated { .. }) => assert!(e.to_string().contains("slice_00004.f32")),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn load_errors_are_distinct() {
        let ds = small();
        let dir = tempfile::tempdir().unwrap();
        ds.save(dir.path()).unwrap();

        let victim = dir.path().join(entry_file(1));
        let mut bytes = fs::read(&victim).unwrap();
        bytes[0] ^= 1;
        fs::write(&victim, &bytes).unwrap();
        assert!(matches!(SliceDataset::load(dir.path()), Err(DataError::ChecksumMismatch { .. })));

        fs::remove_file(&victim).unwrap();
        assert!(matches!(SliceDataset::load(dir.path()), Err(DataError::MissingEntry { .. })));

        let mpath = dir.path().join(MANIFEST_FILE);
        let mut m: serde_json::Value = serde_json::from_slice(&fs::read(&mpath).unwrap()).unwrap();
        m["format_version"] = 2.into();
        fs::write(&mpath, serde_json::to_vec(&m).unwrap()).unwrap();
        assert!(matches!(
            SliceDataset::load(dir.path()),
            Err(DataError::Version { found: 2, expected: 1 })
        ));
    }

    #[test]
    fn batch_is_signed() {
        let ds = small();
        let b = ds.batch(&[0, 5]).unwrap();
        assert_eq!(b.shape(), &[2, 1, 16, 16]);
        assert!(b.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        assert_eq!(b.data()[0], 2.0 * ds.slices[0].pixels[0] - 1.0);
    }
}
