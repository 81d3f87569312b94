//! FID, inception score and MS-SSIM, plus the dataset-level evaluation that
//! combines them.
//!
//! Absolute values depend on the bundled feature extractor and are only
//! comparable between runs that share an `extractor_id`.

mod extractor;
mod fid;
mod inception;
mod ssim;

use std::collections::HashMap;

use rand::Rng as _;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{DataError, SliceDataset};
use crate::nets::{CheckpointError, NetError};
use crate::rng::{hash_str, rng_for};

pub use extractor::{position_class, ExtractorConfig, FeatureExtractor, EXTRACTOR_CLASSES};
pub use fid::{fid, matrix_sqrt_psd, mean_and_covariance, SYMMETRY_TOL};
pub use inception::{inception_score, kl_divergence, DEFAULT_SPLITS, ROW_SUM_TOL};
pub use ssim::{dynamic_range, ms_ssim, ms_ssim_pixels, DEFAULT_SCALES, SCALE_WEIGHTS};

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("{0}")]
    Invalid(String),
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("matrix is not symmetric (max |M - Mᵀ| = {0:e})")]
    Asymmetric(f64),
    #[error("need at least {need} {what}, got {got}")]
    TooFew { what: &'static str, need: usize, got: usize },
    #[error("{height}x{width} is too small for {scales}-scale MS-SSIM (need {need} per side)")]
    TooSmall {
        height: usize,
        width: usize,
        scales: usize,
        need: usize,
    },
    #[error("features come from different extractors ({a} vs {b})")]
    ExtractorMismatch { a: String, b: String },
    #[error("empty {0}")]
    Empty(&'static str),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

/// `[n, dim]` feature rows tagged with the extractor that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSet {
    pub n: usize,
    pub dim: usize,
    pub features: Vec<f64>,
    pub extractor_id: String,
}

impl FeatureSet {
    pub fn new(n: usize, dim: usize, features: Vec<f64>, extractor_id: &str) -> Result<Self, MetricsError> {
        if features.len() != n * dim {
            return Err(MetricsError::Invalid(format!(
                "{} feature values do not form {n}x{dim}",
                features.len()
            )));
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(MetricsError::NonFinite("features"));
        }
        Ok(Self {
            n,
            dim,
            features,
            extractor_id: extractor_id.to_string(),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MsssimMode {
    /// Random pairs of distinct generated slices (lower means more diverse).
    Diversity,
    /// Generated slice against its reference counterpart.
    Paired,
}

/// `(generated index, reference index)` correspondences.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Pairing {
    pub pairs: Vec<(usize, usize)>,
}

impl Pairing {
    /// Pairs slices sharing `(volume_id, slice_index)`.
    pub fn by_key(generated: &SliceDataset, reference: &SliceDataset) -> Result<Self, MetricsError> {
        let at: HashMap<(&str, usize), usize> = reference
            .slices
            .iter()
            .enumerate()
            .map(|(k, s)| ((s.volume_id.as_str(), s.slice_index), k))
            .collect();
        let pairs: Vec<(usize, usize)> = generated
            .slices
            .iter()
            .enumerate()
            .filter_map(|(k, s)| at.get(&(s.volume_id.as_str(), s.slice_index)).map(|&j| (k, j)))
            .collect();
        if pairs.is_empty() {
            return Err(MetricsError::Empty("pairing (no shared slice keys)"));
        }
        Ok(Self { pairs })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalOptions {
    pub is_splits: usize,
    pub scales: usize,
    /// Random pairs drawn in diversity mode.
    pub diversity_pairs: usize,
    pub seed: u64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            is_splits: DEFAULT_SPLITS,
            scales: DEFAULT_SCALES,
            diversity_pairs: 200,
            seed: 0,
        }
    }
}

impl EvalOptions {
    pub fn validate(&self) -> Result<(), MetricsError> {
        if self.is_splits == 0 {
            return Err(MetricsError::Invalid("is_splits must be >= 1".into()));
        }
        if !(1..=SCALE_WEIGHTS.len()).contains(&self.scales) {
            return Err(MetricsError::Invalid(format!(
                "scales must be in 1..={}",
                SCALE_WEIGHTS.len()
            )));
        }
        if self.diversity_pairs == 0 {
            return Err(MetricsError::Invalid("diversity_pairs must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub fid: f64,
    pub is_mean: f64,
    pub is_std: f64,
    pub msssim_mean: f64,
    pub msssim_std: f64,
    pub msssim_mode: MsssimMode,
    pub n_generated: usize,
    pub n_reference: usize,
    pub extractor_id: String,
}

impl MetricReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Header plus one data row.
    pub fn to_csv(&self) -> Result<String, MetricsError> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.serialize(self).map_err(|e| MetricsError::Invalid(e.to_string()))?;
        let bytes = w.into_inner().map_err(|e| MetricsError::Invalid(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv is utf-8"))
    }

    /// Fixed-width summary in the order FID, IS, MS-SSIM.
    pub fn table(&self) -> String {
        format!(
            "{:>10} {:>16} {:>16}\n{:>10.3} {:>16} {:>16}\n",
            "FID↓",
            "IS↑",
            "MS-SSIM↓",
            self.fid,
            format!("{:.3}±{:.3}", self.is_mean, self.is_std),
            format!("{:.3}±{:.3}", self.msssim_mean, self.msssim_std),
        )
    }
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    (m, (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n).sqrt())
}

/// FID of `generated` against `reference`, IS of `generated`, and MS-SSIM in
/// diversity mode (no pairing) or paired mode. Slices are compared in signed
/// range.
pub fn evaluate(
    extractor: &FeatureExtractor,
    generated: &SliceDataset,
    reference: &SliceDataset,
    pairing: Option<&Pairing>,
    opts: &EvalOptions,
) -> Result<MetricReport, MetricsError> {
    if generated.is_empty() {
        return Err(MetricsError::Empty("generated dataset"));
    }
    if reference.is_empty() {
        return Err(MetricsError::Empty("reference dataset"));
    }
    let fa = extractor.features(generated)?;
    let fb = extractor.features(reference)?;
    let fid_value = fid(&fa, &fb)?;
    let probs = extractor.class_probabilities(generated)?;
    let (is_mean, is_std) = inception_score(&probs, generated.len(), EXTRACTOR_CLASSES, opts.is_splits)?;

    let scores: Vec<f64> = match pairing {
        Some(p) => p
            .pairs
            .iter()
            .map(|&(i, j)| {
                let (a, b) = (generated.slices.get(i), reference.slices.get(j));
                match (a, b) {
                    (Some(a), Some(b)) => ms_ssim(&a.to_signed(), &b.to_signed(), opts.scales),
                    _ => Err(MetricsError::Invalid(format!("pair ({i}, {j}) is out of range"))),
                }
            })
            .collect::<Result<_, _>>()?,
        None => {
            let n = generated.len();
            if n < 2 {
                return Err(MetricsError::TooFew {
                    what: "generated slices for diversity MS-SSIM",
                    need: 2,
                    got: n,
                });
            }
            let signed: Vec<_> = generated.slices.iter().map(|s| s.to_signed()).collect();
            let mut rng = rng_for(opts.seed, &[hash_str("msssim-pairs")]);
            (0..opts.diversity_pairs.max(1))
                .map(|_| {
                    let i = rng.random_range(0..n);
                    let j = (i + rng.random_range(1..n)) % n;
                    ms_ssim(&signed[i], &signed[j], opts.scales)
                })
                .collect::<Result<_, _>>()?
        }
    };
    if scores.is_empty() {
        return Err(MetricsError::Empty("MS-SSIM pairs"));
    }
    let (msssim_mean, msssim_std) = mean_std(&scores);
    Ok(MetricReport {
        fid: fid_value,
        is_mean,
        is_std,
        msssim_mean,
        msssim_std,
        msssim_mode: if pairing.is_some() {
            MsssimMode::Paired
        } else {
            MsssimMode::Diversity
        },
        n_generated: generated.len(),
        n_reference: reference.len(),
        extractor_id: extractor.id().to_string(),
    })
}

/// Mean paired MS-SSIM between two datasets matched by slice key.
pub fn paired_ms_ssim(a: &SliceDataset, b: &SliceDataset, scales: usize) -> Result<f64, MetricsError> {
    let p = Pairing::by_key(a, b)?;
    let v: Vec<f64> = p
        .pairs
        .iter()
        .map(|&(i, j)| ms_ssim(&a.slices[i].to_signed(), &b.slices[j].to_signed(), scales))
        .collect::<Result<_, _>>()?;
    Ok(mean_std(&v).0)
}
