//! The three training stages (contrastive slice matching, pretext
//! reconstruction, pretext-guided cycle-adversarial synthesis), slice matching
//! and inference-time synthesis.

mod lsc;
mod matching;
mod pta;
mod sgp;
mod synth;

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corruption::{CorruptionError, CorruptionParams};
use crate::data::{DataError, SliceDataset};
use crate::losses::{LossError, LossReport, LossWeights, DEFAULT_TAU};
use crate::nets::{
    build_encoder, build_unet, component, Checkpoint, CheckpointError, Encoder, NetError, Network, NetworkConfig, Stage,
    UNet,
};
use crate::optim::OptimizerConfig;
use crate::rng::{hash_str, rng_for};
use crate::tensor::Tensor;

pub use lsc::{pretrain_lsc, reconstruction_eval, ReconstructionEval};
pub use matching::{embed, match_embeddings, match_slices, matching_accuracy, MatchAssignment, MatchRule};
pub use pta::{train_pta, GeneratorGraph, GeneratorOverride, GeneratorTerms, PtaModels, PtaOptions};
pub use sgp::pretrain_sgp;
pub use synth::synthesize;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Corruption(#[from] CorruptionError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("non-finite value at step {step}: {detail}")]
    NonFinite { step: u64, detail: String },
}

impl From<crate::tensor::TensorError> for TrainError {
    fn from(e: crate::tensor::TensorError) -> Self {
        Self::Net(e.into())
    }
}

/// Which pretrained components the adversarial stage uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Ablation {
    pub use_sgp: bool,
    pub use_lsc: bool,
}

impl Default for Ablation {
    fn default() -> Self {
        Self {
            use_sgp: true,
            use_lsc: true,
        }
    }
}

impl Ablation {
    pub const BACKBONE: Ablation = Ablation {
        use_sgp: false,
        use_lsc: false,
    };
    pub const SGP: Ablation = Ablation {
        use_sgp: true,
        use_lsc: false,
    };
    pub const LSC: Ablation = Ablation {
        use_sgp: false,
        use_lsc: true,
    };
    pub const FULL: Ablation = Ablation {
        use_sgp: true,
        use_lsc: true,
    };

    pub fn label(&self) -> &'static str {
        match (self.use_sgp, self.use_lsc) {
            (false, false) => "backbone",
            (true, false) => "+sgp",
            (false, true) => "+lsc",
            (true, true) => "+sgp+lsc",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub stage: Stage,
    pub iterations: u64,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
    pub seed: u64,
    pub weights: LossWeights,
    pub tau: f64,
    /// Average the HF→LF direction into the contrastive loss.
    pub symmetric_sgp: bool,
    pub corruption: CorruptionParams,
    pub ablation: Ablation,
    pub match_rule: MatchRule,
    /// Discriminator updates per generator update.
    pub d_updates_per_step: usize,
    /// 0 disables intermediate checkpoints.
    pub checkpoint_every: u64,
    pub network: NetworkConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            stage: Stage::Pta,
            iterations: 2000,
            batch_size: 4,
            optimizer: OptimizerConfig::default(),
            seed: 0,
            weights: LossWeights::default(),
            tau: DEFAULT_TAU,
            symmetric_sgp: false,
            corruption: CorruptionParams::default(),
            ablation: Ablation::default(),
            match_rule: MatchRule::Greedy,
            d_updates_per_step: 1,
            checkpoint_every: 0,
            network: NetworkConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.batch_size == 0 {
            return Err(TrainError::Config("batch_size must be >= 1".into()));
        }
        if !(self.optimizer.learning_rate > 0.0 && self.optimizer.learning_rate.is_finite()) {
            return Err(TrainError::Config("learning_rate must be positive".into()));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(TrainError::Config("tau must be positive".into()));
        }
        if self.d_updates_per_step == 0 {
            return Err(TrainError::Config("d_updates_per_step must be >= 1".into()));
        }
        if self.stage == Stage::Extractor {
            return Err(TrainError::Config("the extractor is trained by the metrics module".into()));
        }
        self.weights.validate()?;
        self.corruption.validate()?;
        self.network.validate()?;
        Ok(())
    }
}

/// Read access to a set of slices. Training loops only touch pixels through
/// [`SliceSource::batch`]; positional metadata goes through
/// [`SliceSource::neighbor`], which the unpaired stage calls only when the
/// encoder takes multi-slice context.
pub trait SliceSource {
    fn len(&self) -> usize;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn dims(&self) -> (usize, usize);

    /// Signed-range `[N, 1, H, W]` batch.
    fn batch(&self, indices: &[usize]) -> Result<Tensor<f32>, DataError>;

    /// Index of the slice `offset` positions away within the same volume, or
    /// `i` itself when there is none.
    fn neighbor(&self, i: usize, offset: isize) -> usize;
}

impl SliceSource for SliceDataset {
    fn len(&self) -> usize {
        self.slices.len()
    }

    fn dims(&self) -> (usize, usize) {
        (self.meta.height, self.meta.width)
    }

    fn batch(&self, indices: &[usize]) -> Result<Tensor<f32>, DataError> {
        SliceDataset::batch(self, indices)
    }

    fn neighbor(&self, i: usize, offset: isize) -> usize {
        let s = &self.slices[i];
        let Some(target) = s.slice_index.checked_add_signed(offset) else {
            return i;
        };
        self.slices
            .iter()
            .position(|o| o.volume_id == s.volume_id && o.slice_index == target)
            .unwrap_or(i)
    }
}

/// `[N, k, H, W]` encoder input: each slice with its `k/2` neighbours on each
/// side as channels (edge slices repeat themselves).
pub fn context_batch<S: SliceSource + ?Sized>(src: &S, indices: &[usize], k: usize) -> Result<Tensor<f32>, DataError> {
    if k == 1 {
        return src.batch(indices);
    }
    let half = (k / 2) as isize;
    let mut order = Vec::with_capacity(indices.len() * k);
    for &i in indices {
        for off in -half..=half {
            order.push(src.neighbor(i, off));
        }
    }
    let flat = src.batch(&order)?;
    let (h, w) = src.dims();
    Ok(flat.reshape(&[indices.len(), k, h, w]).expect("same element count"))
}

/// `k` distinct indices in `0..n` for `step` of the stream `stream`.
pub(crate) fn sample_batch(n: usize, k: usize, seed: u64, stream: &str, step: u64) -> Result<Vec<usize>, TrainError> {
    if k > n {
        return Err(TrainError::Config(format!("batch_size {k} exceeds dataset size {n}")));
    }
    let mut rng = rng_for(seed, &[hash_str(stream), step]);
    Ok(sample(&mut rng, n, k).into_vec())
}

pub(crate) fn check_finite(step: u64, report: &LossReport) -> Result<(), TrainError> {
    if let Some((name, v)) = report.values().find(|(_, v)| !v.is_finite()) {
        return Err(TrainError::NonFinite {
            step,
            detail: format!("{name} = {v} ({report:?})"),
        });
    }
    Ok(())
}

/// Checkpoint of a pretrained encoder (`stage = Sgp`) or pretext network
/// (`stage = Lsc`) with the training config echoed into `extra`.
pub fn stage_checkpoint<A>(net: &Network<A>, cfg: &TrainConfig, height: usize, width: usize) -> Checkpoint {
    let name = match cfg.stage {
        Stage::Sgp => component::ENCODER,
        _ => component::PRETEXT,
    };
    let mut c = Checkpoint::new(cfg.stage, cfg.network, height, width).with_component(name, &net.params);
    c.extra = serde_json::to_value(cfg).expect("config serializes");
    c
}

pub fn load_encoder(ckpt: &Checkpoint) -> Result<Network<Encoder>, TrainError> {
    ckpt.expect_stage(Stage::Sgp)?;
    let mut net = build_encoder(&ckpt.network, component::ENCODER)?;
    ckpt.load_into(component::ENCODER, &mut net)?;
    Ok(net)
}

pub fn load_pretext(ckpt: &Checkpoint) -> Result<Network<UNet>, TrainError> {
    ckpt.expect_stage(Stage::Lsc)?;
    let mut net = build_unet(&ckpt.network, component::PRETEXT)?;
    ckpt.load_into(component::PRETEXT, &mut net)?;
    Ok(net)
}
