//! The small classifier whose pooled features feed FID and whose posteriors
//! feed IS. It is trained once, from a fixed phantom recipe, to predict which
//! eighth of its volume a slice comes from.

use serde::{Deserialize, Serialize};

use super::{FeatureSet, MetricsError};
use crate::autodiff::Graph;
use crate::data::{degrade_to_lowfield, generate_phantom_volume, PhantomConfig, SliceDataset, Volume};
use crate::nets::{component, Checkpoint, Encoder, Module, Network, NetworkConfig, Stage};
use crate::optim::{Optimizer, OptimizerConfig};
use crate::params::ParamStore;
use crate::rng::{hash_str, rng_for};
use crate::training::sample_batch;

pub const EXTRACTOR_CLASSES: usize = 8;
const CHUNK: usize = 32;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExtractorConfig {
    pub network: NetworkConfig,
    /// Recipe for the auxiliary training set (HF volumes plus their LF copies).
    pub phantom: PhantomConfig,
    pub iterations: u64,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
    pub seed: u64,
}

impl Default for ExtractorConfig {
    fn default() -> Self {
        Self {
            network: NetworkConfig {
                base_channels: 8,
                seed: 0xFEA7,
                ..Default::default()
            },
            phantom: PhantomConfig {
                num_volumes: 12,
                seed: 0xFEA7,
                ..Default::default()
            },
            iterations: 300,
            batch_size: 16,
            optimizer: OptimizerConfig {
                learning_rate: 1e-3,
                ..Default::default()
            },
            seed: 0,
        }
    }
}

impl ExtractorConfig {
    pub fn validate(&self) -> Result<(), MetricsError> {
        self.network.validate()?;
        self.phantom.validate()?;
        if self.batch_size == 0 {
            return Err(MetricsError::Invalid("extractor batch_size must be >= 1".into()));
        }
        if !(self.optimizer.learning_rate > 0.0 && self.optimizer.learning_rate.is_finite()) {
            return Err(MetricsError::Invalid("extractor learning_rate must be positive".into()));
        }
        Ok(())
    }
}

/// Class of a slice: which of `EXTRACTOR_CLASSES` equal position bins along
/// the volume it falls into.
pub fn position_class(slice_index: usize, slices_per_volume: usize) -> usize {
    (slice_index * EXTRACTOR_CLASSES / slices_per_volume.max(1)).min(EXTRACTOR_CLASSES - 1)
}

#[derive(Debug, Clone)]
pub struct FeatureExtractor {
    pub config: ExtractorConfig,
    pub net: Network<Encoder>,
    id: String,
}

impl FeatureExtractor {
    fn build(config: ExtractorConfig, params: Option<&ParamStore<f32>>) -> Result<Self, MetricsError> {
        config.network.validate()?;
        let mut store = ParamStore::new();
        let mut rng = rng_for(config.network.seed, &[hash_str(component::EXTRACTOR)]);
        let arch = Encoder::new(
            &config.network,
            component::EXTRACTOR,
            1,
            EXTRACTOR_CLASSES,
            false,
            &mut store,
            &mut rng,
        );
        let mut out = Self {
            config,
            net: Network { arch, params: store },
            id: String::new(),
        };
        if let Some(p) = params {
            out.net.params = p.clone();
        }
        out.id = out.checkpoint().sha256();
        Ok(out)
    }

    /// Seeded initialisation, no training.
    pub fn untrained(config: ExtractorConfig) -> Result<Self, MetricsError> {
        Self::build(config, None)
    }

    /// Trains on the recipe in `config`; returns the per-step cross-entropy.
    pub fn train(config: ExtractorConfig) -> Result<(Self, Vec<f64>), MetricsError> {
        config.validate()?;
        let pc = &config.phantom;
        let hf: Vec<Volume> = (0..pc.num_volumes as u64)
            .map(|v| generate_phantom_volume(pc, v))
            .collect::<Result<_, _>>()?;
        let mut all = hf.clone();
        for v in &hf {
            all.push(degrade_to_lowfield(v, pc)?);
        }
        let ds = SliceDataset::from_volumes(&all, pc.seed)?;
        let labels: Vec<usize> = ds
            .slices
            .iter()
            .map(|s| position_class(s.slice_index, pc.slices_per_volume))
            .collect();
        let mut ex = Self::build(config.clone(), None)?;
        let mut opt = Optimizer::new(config.optimizer, &ex.net.params);
        let mut history = Vec::with_capacity(config.iterations as usize);
        for step in 0..config.iterations {
            let idx = sample_batch(ds.len(), config.batch_size, config.seed, "extractor-batch", step)
                .map_err(|e| MetricsError::Invalid(e.to_string()))?;
            let y: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
            let mut g = Graph::<f32>::new();
            let p = g.bind(&ex.net.params, true);
            let x = g.constant(ds.batch(&idx)?);
            let logits = ex.net.arch.forward(&mut g, &p, x)?;
            let loss = g.label_cross_entropy(logits, &y).map_err(crate::nets::NetError::from)?;
            let value = g.scalar(loss);
            if !value.is_finite() {
                return Err(MetricsError::NonFinite("extractor training loss"));
            }
            history.push(value);
            let grads = g
                .backward(loss)
                .map_err(crate::nets::NetError::from)?
                .for_params(&p, &ex.net.params);
            opt.step(&mut ex.net.params, &grads);
        }
        ex.id = ex.checkpoint().sha256();
        Ok((ex, history))
    }

    /// Hash of the weights and the recipe.
    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut c = Checkpoint::new(
            Stage::Extractor,
            self.config.network,
            self.config.phantom.image_size,
            self.config.phantom.image_size,
        )
        .with_component(component::EXTRACTOR, &self.net.params);
        c.extra = serde_json::to_value(&self.config).expect("config serializes");
        c
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self, MetricsError> {
        ckpt.expect_stage(Stage::Extractor)?;
        let config: ExtractorConfig = serde_json::from_value(ckpt.extra.clone())
            .map_err(|e| MetricsError::Invalid(format!("extractor config in checkpoint: {e}")))?;
        let mut ex = Self::build(config, None)?;
        ckpt.load_into(component::EXTRACTOR, &mut ex.net)?;
        ex.id = ex.checkpoint().sha256();
        Ok(ex)
    }

    /// Pooled trunk features, one row per slice.
    pub fn features(&self, ds: &SliceDataset) -> Result<FeatureSet, MetricsError> {
        if ds.is_empty() {
            return Err(MetricsError::Empty("dataset"));
        }
        let d = self.net.arch.feature_dim();
        let mut out = Vec::with_capacity(ds.len() * d);
        let all: Vec<usize> = (0..ds.len()).collect();
        for chunk in all.chunks(CHUNK) {
            let mut g = Graph::<f32>::new();
            let p = g.bind(&self.net.params, false);
            let x = g.constant(ds.batch(chunk)?);
            let f = self.net.arch.features(&mut g, &p, x)?;
            out.extend(g.value(f).data().iter().map(|&v| v as f64));
        }
        FeatureSet::new(ds.len(), d, out, &self.id)
    }

    /// Softmax class posteriors `[N, EXTRACTOR_CLASSES]`, row-major.
    pub fn class_probabilities(&self, ds: &SliceDataset) -> Result<Vec<f64>, MetricsError> {
        if ds.is_empty() {
            return Err(MetricsError::Empty("dataset"));
        }
        let k = EXTRACTOR_CLASSES;
        let mut out = Vec::with_capacity(ds.len() * k);
        let all: Vec<usize> = (0..ds.len()).collect();
        for chunk in all.chunks(CHUNK) {
            let logits = self.net.infer(&ds.batch(chunk)?)?;
            for row in logits.data().chunks(k) {
                let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v as f64));
                let e: Vec<f64> = row.iter().map(|&v| (v as f64 - max).exp()).collect();
                let s: f64 = e.iter().sum();
                out.extend(e.iter().map(|v| v / s));
            }
        }
        Ok(out)
    }
}
