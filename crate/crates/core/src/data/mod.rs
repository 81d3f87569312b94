//! Slices, volumes, the phantom generator, low-field degradation and the
//! on-disk slice dataset format.

mod dataset;
mod degrade;
mod phantom;
mod preview;

use std::path::PathBuf;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::{hash_str, rng_for};
use crate::tensor::Tensor;

pub use dataset::{DatasetMeta, SliceDataset, DATASET_FORMAT_VERSION, MANIFEST_FILE};
pub use degrade::{degrade_to_lowfield, gaussian_blur, lowfield_noise_free};
pub use phantom::{generate_phantom_volume, EllipseCount, PhantomConfig};
pub use preview::{to_gray8, write_preview_png};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid config field `{field}`: {message}")]
    Config { field: &'static str, message: String },
    #[error("I/O error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("dataset format version {found} is not supported (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("malformed manifest {path}: {message}")]
    Manifest { path: PathBuf, message: String },
    #[error("entry {entry} ({path}) is missing")]
    MissingEntry { entry: String, path: PathBuf },
    #[error("entry {entry} ({path}) is truncated: {found} bytes, expected {expected}")]
    Truncated {
        entry: String,
        path: PathBuf,
        expected: u64,
        found: u64,
    },
    #[error("entry {entry} ({path}) does not match manifest dimensions: {found} bytes, expected {expected}")]
    DimensionMismatch {
        entry: String,
        path: PathBuf,
        expected: u64,
        found: u64,
    },
    #[error("entry {entry} ({path}) failed its checksum")]
    ChecksumMismatch { entry: String, path: PathBuf },
    #[error("{0}")]
    Invalid(String),
}

/// Declared intensity range of a slice's pixels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IntensityRange {
    Raw,
    Unit,
    Signed,
}

impl IntensityRange {
    /// `(lo, hi)` bounds, `None` for raw data.
    pub fn bounds(self) -> Option<(f32, f32)> {
        match self {
            Self::Raw => None,
            Self::Unit => Some((0.0, 1.0)),
            Self::Signed => Some((-1.0, 1.0)),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Contrast {
    T1,
    T2,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FieldStrength {
    #[serde(rename = "LF")]
    Low,
    #[serde(rename = "HF")]
    High,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Slice {
    pub height: usize,
    pub width: usize,
    /// Row-major `height × width`.
    pub pixels: Vec<f32>,
    pub intensity_range: IntensityRange,
    pub contrast: Contrast,
    pub volume_id: String,
    pub slice_index: usize,
}

impl Slice {
    pub fn new(
        height: usize,
        width: usize,
        pixels: Vec<f32>,
        intensity_range: IntensityRange,
        contrast: Contrast,
        volume_id: impl Into<String>,
        slice_index: usize,
    ) -> Result<Self, DataError> {
        if height == 0 || width == 0 || pixels.len() != height * width {
            return Err(DataError::Invalid(format!(
                "slice of {height}x{width} given {} pixels",
                pixels.len()
            )));
        }
        let s = Self {
            height,
            width,
            pixels,
            intensity_range,
            contrast,
            volume_id: volume_id.into(),
            slice_index,
        };
        s.check_range()?;
        Ok(s)
    }

    pub fn check_range(&self) -> Result<(), DataError> {
        if let Some(bad) = self.pixels.iter().find(|v| !v.is_finite()) {
            return Err(DataError::Invalid(format!("slice {} has non-finite pixel {bad}", self.key())));
        }
        if let Some((lo, hi)) = self.intensity_range.bounds() {
            if let Some(bad) = self.pixels.iter().find(|&&v| v < lo || v > hi) {
                return Err(DataError::Invalid(format!(
                    "slice {} tagged {:?} has pixel {bad} outside [{lo}, {hi}]",
                    self.key(),
                    self.intensity_range
                )));
            }
        }
        Ok(())
    }

    pub fn key(&self) -> String {
        format!("{}#{}", self.volume_id, self.slice_index)
    }

    pub fn at(&self, row: usize, col: usize) -> f32 {
        self.pixels[row * self.width + col]
    }

    /// Same metadata, new pixels and range tag.
    pub fn with_pixels(&self, pixels: Vec<f32>, intensity_range: IntensityRange) -> Self {
        debug_assert_eq!(pixels.len(), self.pixels.len());
        Self {
            pixels,
            intensity_range,
            ..self.clone()
        }
    }

    /// Pixels in `[-1, 1]`. Unit data uses the fixed map `2x - 1` so that
    /// intensities stay comparable across slices; raw data is min-max scaled.
    pub fn to_signed(&self) -> Slice {
        match self.intensity_range {
            IntensityRange::Signed => self.clone(),
            IntensityRange::Unit => self.with_pixels(
                self.pixels.iter().map(|&v| 2.0 * v - 1.0).collect(),
                IntensityRange::Signed,
            ),
            IntensityRange::Raw => normalize_slice(self, IntensityRange::Signed),
        }
    }
}

/// Affine min-max map onto `target`. Constant slices land on the range midpoint.
/// A `Raw` target leaves the pixels untouched.
pub fn normalize_slice(s: &Slice, target: IntensityRange) -> Slice {
    let Some((lo, hi)) = target.bounds() else {
        return s.with_pixels(s.pixels.clone(), target);
    };
    let (min, max) = s
        .pixels
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let pixels = if max > min {
        let (min, max) = (min as f64, max as f64);
        let span = (hi - lo) as f64;
        s.pixels
            .iter()
            .map(|&v| ((v as f64 - min) / (max - min) * span + lo as f64) as f32)
            .map(|v| v.clamp(lo, hi))
            .collect()
    } else {
        vec![(lo + hi) / 2.0; s.pixels.len()]
    };
    s.with_pixels(pixels, target)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    pub slices: Vec<Slice>,
    pub field_strength: FieldStrength,
}

impl Volume {
    pub fn volume_id(&self) -> &str {
        self.slices.first().map(|s| s.volume_id.as_str()).unwrap_or("")
    }
}

/// Shuffles `items` so that `out[k] = items[perm[k]]`.
pub fn shuffle_with_permutation<S: Clone>(items: &[S], seed: u64) -> Result<(Vec<S>, Vec<usize>), DataError> {
    if items.is_empty() {
        return Err(DataError::Invalid("cannot shuffle an empty list".into()));
    }
    let mut perm: Vec<usize> = (0..items.len()).collect();
    perm.shuffle(&mut rng_for(seed, &[hash_str("shuffle")]));
    let out = perm.iter().map(|&i| items[i].clone()).collect();
    Ok((out, perm))
}

pub fn invert_permutation(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (k, &p) in perm.iter().enumerate() {
        inv[p] = k;
    }
    inv
}

/// Stacks slices into a signed-range `[N, 1, H, W]` batch.
pub fn stack_signed<'a>(slices: impl IntoIterator<Item = &'a Slice>) -> Result<Tensor<f32>, DataError> {
    let mut data = Vec::new();
    let mut dims = None;
    let mut n = 0;
    for s in slices {
        match dims {
            None => dims = Some((s.height, s.width)),
            Some(d) if d != (s.height, s.width) => {
                return Err(DataError::Invalid(format!(
                    "cannot batch {}x{} slice with {}x{} slices",
                    s.height, s.width, d.0, d.1
                )))
            }
            _ => {}
        }
        data.extend(s.to_signed().pixels);
        n += 1;
    }
    let (h, w) = dims.ok_or_else(|| DataError::Invalid("empty batch".into()))?;
    Ok(Tensor::from_vec(&[n, 1, h, w], data).expect("consistent batch size"))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn slice(pixels: Vec<f32>, range: IntensityRange) -> Slice {
        let n = pixels.len();
        Slice::new(1, n, pixels, range, Contrast::T1, "v", 0).unwrap()
    }

    #[test]
    fn constant_slice_maps_to_midpoint() {
        let s = slice(vec![5.0; 4], IntensityRange::Raw);
        assert_eq!(normalize_slice(&s, IntensityRange::Signed).pixels, vec![0.0; 4]);
        assert_eq!(normalize_slice(&s, IntensityRange::Unit).pixels, vec![0.5; 4]);
    }

    #[test]
    fn endpoints_map_to_range_ends() {
        let s = slice(vec![0.0, 10.0], IntensityRange::Raw);
        let n = normalize_slice(&s, IntensityRange::Unit);
        assert_eq!(n.pixels, vec![0.0, 1.0]);
        assert_eq!(n.intensity_range, IntensityRange::Unit);
    }

    #[test]
    fn normalization_is_idempotent() {
        let s = slice(vec![3.0, -1.5, 7.25, 0.0, 2.0], IntensityRange::Raw);
        let once = normalize_slice(&s, IntensityRange::Unit);
        let twice = normalize_slice(&once, IntensityRange::Unit);
        assert_eq!(once, twice);
    }

    #[test]
    fn range_tag_is_enforced() {
        assert!(Slice::new(1, 2, vec![0.0, 1.5], IntensityRange::Unit, Contrast::T1, "v", 0).is_err());
        assert!(Slice::new(1, 2, vec![-1.0, 1.0], IntensityRange::Signed, Contrast::T1, "v", 0).is_ok());
        assert!(Slice::new(1, 2, vec![0.0, f32::NAN], IntensityRange::Raw, Contrast::T1, "v", 0).is_err());
    }

    #[test]
    fn shuffle_single_item() {
        let (out, perm) = shuffle_with_permutation(&[42], 9).unwrap();
        assert_eq!((out, perm), (vec![42], vec![0]));
    }

    #[test]
    fn shuffle_is_a_deterministic_bijection() {
        let items: Vec<u32> = (0..37).collect();
        let (out, perm) = shuffle_with_permutation(&items, 3).unwrap();
        let (out2, perm2) = shuffle_with_permutation(&items, 3).unwrap();
        assert_eq!(perm, perm2);
        assert_eq!(out, out2);
        let mut sorted = perm.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, items.iter().map(|&i| i as usize).collect::<Vec<_>>());
        for (k, &p) in perm.iter().enumerate() {
            assert_eq!(out[k], items[p]);
        }
        let inv = invert_permutation(&perm);
        let restored: Vec<u32> = inv.iter().map(|&k| out[k]).collect();
        assert_eq!(restored, items);
        assert!(shuffle_with_permutation::<u32>(&[], 0).is_err());
    }

    #[test]
    fn unit_to_signed_is_fixed_affine() {
        let s = slice(vec![0.0, 0.25, 1.0], IntensityRange::Unit);
        assert_eq!(s.to_signed().pixels, vec![-1.0, -0.5, 1.0]);
    }
}
