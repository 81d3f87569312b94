//! Pretext pretraining: reconstruct HF slices from block-corrupted copies.

use super::{check_finite, sample_batch, SliceSource, TrainConfig, TrainError};
use crate::autodiff::{Graph, GATHER_FILL};
use crate::corruption::{corrupt_batch_plan, CorruptionParams};
use crate::data::SliceDataset;
use crate::losses::LossReport;
use crate::nets::{build_unet, component, Module, Network, UNet};
use crate::optim::Optimizer;
use crate::rng::{derive_seed, hash_str};

/// Per step: sample an HF batch, corrupt it with a fresh per-step seed and
/// minimise the squared error between the reconstruction and the original.
pub fn pretrain_lsc(
    hf: &SliceDataset,
    cfg: &TrainConfig,
    on_step: &mut dyn FnMut(u64, &Network<UNet>, &LossReport) -> Result<(), TrainError>,
) -> Result<(Network<UNet>, Vec<LossReport>), TrainError> {
    cfg.validate()?;
    if hf.is_empty() {
        return Err(TrainError::Config("pretext pretraining needs a non-empty HF dataset".into()));
    }
    let (h, w) = hf.dims();
    cfg.network.check_size(h, w)?;
    let mut net = build_unet(&cfg.network, component::PRETEXT)?;
    let mut opt = Optimizer::new(cfg.optimizer, &net.params);
    let mut history = Vec::with_capacity(cfg.iterations as usize);
    for step in 0..cfg.iterations {
        let idx = sample_batch(hf.len(), cfg.batch_size, cfg.seed, "lsc-batch", step)?;
        let x = hf.batch(&idx)?;
        let plan = corrupt_batch_plan(
            idx.len(),
            h,
            w,
            &cfg.corruption,
            derive_seed(cfg.seed, &[hash_str("lsc-corrupt"), step]),
        )?;

        let mut g = Graph::<f32>::new();
        let p = g.bind(&net.params, true);
        let xv = g.constant(x);
        let shape = g.value(xv).shape().to_vec();
        let corrupted = g.gather(xv, plan.map.clone(), plan.fill as f64, &shape)?;
        let recon = net.arch.forward(&mut g, &p, corrupted)?;
        let loss = g.mse(xv, recon)?;

        let mut report = LossReport::new(step, &cfg.weights);
        report.lsc = Some(g.scalar(loss));
        check_finite(step, &report)?;
        let grads = g.backward(loss)?.for_params(&p, &net.params);
        opt.step(&mut net.params, &grads);
        if !net.params.all_finite() {
            return Err(TrainError::NonFinite {
                step,
                detail: "pretext parameters".into(),
            });
        }
        on_step(step, &net, &report)?;
        history.push(report);
    }
    Ok((net, history))
}

/// Reconstruction quality on corrupted held-out slices, in signed range.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReconstructionEval {
    /// `MSE(E_T(corrupted), original)` over all pixels.
    pub reconstructed: f64,
    /// `MSE(corrupted, original)` over all pixels.
    pub corrupted: f64,
    /// Both errors restricted to masked pixels.
    pub masked_reconstructed: f64,
    pub masked_fill: f64,
    pub slices: usize,
}

pub fn reconstruction_eval(
    net: &Network<UNet>,
    ds: &SliceDataset,
    params: &CorruptionParams,
    seed: u64,
    batch: usize,
) -> Result<ReconstructionEval, TrainError> {
    let (h, w) = ds.dims();
    let (mut rec, mut cor, mut mrec, mut mfill) = (0.0, 0.0, 0.0, 0.0);
    let (mut n_all, mut n_mask) = (0usize, 0usize);
    let all: Vec<usize> = (0..ds.len()).collect();
    for (b, chunk) in all.chunks(batch.max(1)).enumerate() {
        let x = ds.batch(chunk)?;
        let plan = corrupt_batch_plan(chunk.len(), h, w, params, derive_seed(seed, &[hash_str("lsc-eval"), b as u64]))?;
        let corrupted: Vec<f32> = plan
            .map
            .iter()
            .map(|&m| if m == GATHER_FILL { plan.fill } else { x.data()[m as usize] })
            .collect();
        let xc = crate::tensor::Tensor::from_vec(x.shape(), corrupted)?;
        let y = net.infer(&xc)?;
        for (k, ((&o, &c), &r)) in x.data().iter().zip(xc.data()).zip(y.data()).enumerate() {
            let (eo, ec) = ((r - o) as f64, (c - o) as f64);
            rec += eo * eo;
            cor += ec * ec;
            n_all += 1;
            if plan.map[k] == GATHER_FILL {
                mrec += eo * eo;
                mfill += ec * ec;
                n_mask += 1;
            }
        }
    }
    let div = |s: f64, n: usize| if n == 0 { 0.0 } else { s / n as f64 };
    Ok(ReconstructionEval {
        reconstructed: div(rec, n_all),
        corrupted: div(cor, n_all),
        masked_reconstructed: div(mrec, n_mask),
        masked_fill: div(mfill, n_mask),
        slices: ds.len(),
    })
}
