//! Inference: translate an LF dataset with a trained generator.

use serde_json::json;

use super::{PtaModels, TrainError};
use crate::data::{DatasetMeta, FieldStrength, IntensityRange, SliceDataset};
use crate::nets::Checkpoint;

const CHUNK: usize = 8;

/// Runs the LF→HF generator of `ckpt` over every slice of `lf`. The output
/// keeps slice identities, is tagged HF and signed range, and records the
/// generator and source hashes as provenance.
pub fn synthesize(ckpt: &Checkpoint, ckpt_sha: &str, lf: &SliceDataset) -> Result<SliceDataset, TrainError> {
    let models = PtaModels::from_checkpoint(ckpt)?;
    let (h, w) = (lf.meta.height, lf.meta.width);
    if (h, w) != (ckpt.image_height, ckpt.image_width) {
        return Err(TrainError::Config(format!(
            "checkpoint was trained on {}x{} slices, dataset has {h}x{w}",
            ckpt.image_height, ckpt.image_width
        )));
    }
    let mut slices = Vec::with_capacity(lf.len());
    let all: Vec<usize> = (0..lf.len()).collect();
    for chunk in all.chunks(CHUNK) {
        let y = models.g_lf2hf.infer(&lf.batch(chunk)?)?;
        for (k, &i) in chunk.iter().enumerate() {
            let px: Vec<f32> = y.data()[k * h * w..(k + 1) * h * w]
                .iter()
                .map(|v| v.clamp(-1.0, 1.0))
                .collect();
            slices.push(lf.slices[i].with_pixels(px, IntensityRange::Signed));
        }
    }
    let meta = DatasetMeta {
        field_strength: FieldStrength::High,
        normalization: IntensityRange::Signed,
        provenance: Some(json!({
            "generator_sha256": ckpt_sha,
            "source_sha256": lf.content_hash(),
        })),
        ..lf.meta.clone()
    };
    Ok(SliceDataset::new(meta, slices)?)
}
