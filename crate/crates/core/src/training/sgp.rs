//! Contrastive pretraining of the slice encoder.

use std::collections::HashMap;

use super::{check_finite, context_batch, sample_batch, TrainConfig, TrainError};
use crate::autodiff::Graph;
use crate::data::SliceDataset;
use crate::losses::{sgp_term, LossReport};
use crate::nets::{build_encoder, component, Encoder, Module, Network};
use crate::optim::Optimizer;

/// Trains the encoder so that an LF slice and the HF slice at the same
/// `(volume_id, slice_index)` embed close together, with the rest of the batch
/// as negatives. `on_step` sees the encoder after every update.
pub fn pretrain_sgp(
    lf: &SliceDataset,
    hf: &SliceDataset,
    cfg: &TrainConfig,
    on_step: &mut dyn FnMut(u64, &Network<Encoder>, &LossReport) -> Result<(), TrainError>,
) -> Result<(Network<Encoder>, Vec<LossReport>), TrainError> {
    cfg.validate()?;
    if lf.is_empty() || hf.is_empty() {
        return Err(TrainError::Config("contrastive pretraining needs non-empty LF and HF datasets".into()));
    }
    if (lf.meta.height, lf.meta.width) != (hf.meta.height, hf.meta.width) {
        return Err(TrainError::Config("LF and HF datasets differ in slice dimensions".into()));
    }
    cfg.network.check_size(lf.meta.height, lf.meta.width)?;
    let hf_at: HashMap<(&str, usize), usize> = hf
        .slices
        .iter()
        .enumerate()
        .map(|(k, s)| ((s.volume_id.as_str(), s.slice_index), k))
        .collect();
    let pairs: Vec<(usize, usize)> = lf
        .slices
        .iter()
        .enumerate()
        .filter_map(|(k, s)| hf_at.get(&(s.volume_id.as_str(), s.slice_index)).map(|&j| (k, j)))
        .collect();
    if pairs.is_empty() {
        return Err(TrainError::Config("no LF slice shares (volume_id, slice_index) with an HF slice".into()));
    }
    let context = cfg.network.context_slices;
    let mut encoder = build_encoder(&cfg.network, component::ENCODER)?;
    let mut opt = Optimizer::new(cfg.optimizer, &encoder.params);
    let mut history = Vec::with_capacity(cfg.iterations as usize);
    for step in 0..cfg.iterations {
        let picked = sample_batch(pairs.len(), cfg.batch_size, cfg.seed, "sgp-batch", step)?;
        let lf_idx: Vec<usize> = picked.iter().map(|&k| pairs[k].0).collect();
        let hf_idx: Vec<usize> = picked.iter().map(|&k| pairs[k].1).collect();
        let x_lf = context_batch(lf, &lf_idx, context)?;
        let x_hf = context_batch(hf, &hf_idx, context)?;

        let mut g = Graph::<f32>::new();
        let p = g.bind(&encoder.params, true);
        let a = g.constant(x_lf);
        let b = g.constant(x_hf);
        let e_lf = encoder.arch.forward(&mut g, &p, a)?;
        let e_hf = encoder.arch.forward(&mut g, &p, b)?;
        let loss = sgp_term(&mut g, e_lf, e_hf, cfg.tau, cfg.symmetric_sgp)?;

        let mut report = LossReport::new(step, &cfg.weights);
        report.sgp = Some(g.scalar(loss));
        check_finite(step, &report)?;
        let grads = g.backward(loss)?.for_params(&p, &encoder.params);
        opt.step(&mut encoder.params, &grads);
        if !encoder.params.all_finite() {
            return Err(TrainError::NonFinite {
                step,
                detail: "encoder parameters".into(),
            });
        }
        on_step(step, &encoder, &report)?;
        history.push(report);
    }
    Ok((encoder, history))
}
