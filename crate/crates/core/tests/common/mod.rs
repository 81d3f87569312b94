#![allow(dead_code)]

use pta_core::data::{degrade_to_lowfield, generate_phantom_volume, PhantomConfig, SliceDataset, Volume};
use pta_core::nets::{NetworkConfig, Stage};
use pta_core::training::{Ablation, TrainConfig};

pub fn phantom_config() -> PhantomConfig {
    PhantomConfig {
        image_size: 32,
        num_volumes: 2,
        slices_per_volume: 4,
        block_size: 8,
        ..Default::default()
    }
}

/// Paired `(lf, hf)` datasets from volumes `seeds`.
pub fn datasets(cfg: &PhantomConfig, seeds: std::ops::Range<u64>) -> (SliceDataset, SliceDataset) {
    let hf: Vec<Volume> = seeds.map(|s| generate_phantom_volume(cfg, s).unwrap()).collect();
    let lf: Vec<Volume> = hf.iter().map(|v| degrade_to_lowfield(v, cfg).unwrap()).collect();
    (
        SliceDataset::from_volumes(&lf, 1).unwrap(),
        SliceDataset::from_volumes(&hf, 2).unwrap(),
    )
}

pub fn small_net() -> NetworkConfig {
    NetworkConfig {
        base_channels: 2,
        depth: 2,
        embed_dim: 4,
        ..Default::default()
    }
}

pub fn train_config(stage: Stage, iterations: u64, ablation: Ablation) -> TrainConfig {
    TrainConfig {
        stage,
        iterations,
        batch_size: 4,
        ablation,
        network: small_net(),
        seed: 11,
        ..Default::default()
    }
}
