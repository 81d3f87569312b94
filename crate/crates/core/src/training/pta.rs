//! Pretext-guided cycle-adversarial training of the two generators and two
//! patch discriminators.

use super::{check_finite, embed, match_embeddings, sample_batch, SliceSource, TrainConfig, TrainError};
use crate::autodiff::{Bound, Graph, Var};
use crate::corruption::{corrupt_batch_plan, BatchCorruption};
use crate::losses::{adversarial_d_term, adversarial_g_term, LossReport, LossWeights};
use crate::nets::{
    build_discriminator, build_unet, component, Checkpoint, Encoder, Module, Network, NetworkConfig,
    PatchDiscriminator, Stage, UNet,
};
use crate::optim::Optimizer;
use crate::rng::{derive_seed, hash_str};
use crate::tensor::{Scalar, Tensor};

/// The four networks trained in the adversarial stage.
#[derive(Debug, Clone)]
pub struct PtaModels {
    pub g_lf2hf: Network<UNet>,
    pub g_hf2lf: Network<UNet>,
    pub d_hf: Network<PatchDiscriminator>,
    pub d_lf: Network<PatchDiscriminator>,
}

impl PtaModels {
    pub fn new(cfg: &NetworkConfig) -> Result<Self, TrainError> {
        Ok(Self {
            g_lf2hf: build_unet(cfg, component::G_LF2HF)?,
            g_hf2lf: build_unet(cfg, component::G_HF2LF)?,
            d_hf: build_discriminator(cfg, component::D_HF)?,
            d_lf: build_discriminator(cfg, component::D_LF)?,
        })
    }

    pub fn checkpoint(&self, cfg: &NetworkConfig, height: usize, width: usize) -> Checkpoint {
        Checkpoint::new(Stage::Pta, *cfg, height, width)
            .with_component(component::G_LF2HF, &self.g_lf2hf.params)
            .with_component(component::G_HF2LF, &self.g_hf2lf.params)
            .with_component(component::D_HF, &self.d_hf.params)
            .with_component(component::D_LF, &self.d_lf.params)
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self, TrainError> {
        ckpt.expect_stage(Stage::Pta)?;
        let mut m = Self::new(&ckpt.network)?;
        ckpt.load_into(component::G_LF2HF, &mut m.g_lf2hf)?;
        ckpt.load_into(component::G_HF2LF, &mut m.g_hf2lf)?;
        ckpt.load_into(component::D_HF, &mut m.d_hf)?;
        ckpt.load_into(component::D_LF, &mut m.d_lf)?;
        Ok(m)
    }

    pub fn all_finite(&self) -> bool {
        self.g_lf2hf.params.all_finite()
            && self.g_hf2lf.params.all_finite()
            && self.d_hf.params.all_finite()
            && self.d_lf.params.all_finite()
    }
}

/// Test hook replacing both generators.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub enum GeneratorOverride {
    #[default]
    None,
    /// Both generators return their input; generator weights are not updated.
    Identity,
}

#[derive(Debug, Clone, Default)]
pub struct PtaOptions {
    pub generator_override: GeneratorOverride,
}

/// Per-step generator-side graph nodes.
#[derive(Debug, Clone, Copy)]
pub struct GeneratorTerms {
    pub fake_hf: Var,
    pub fake_lf: Var,
    /// `L1(F(G(x)), x) + L1(G(F(y)), y)`.
    pub cycle: Var,
    /// Least-squares generator term summed over both discriminators.
    pub adv: Var,
    /// Pretext synthesis loss; absent without a pretext network.
    pub syn: Option<Var>,
    /// `λ₁·syn + λ₂·cycle + λ₃·adv`.
    pub total: Var,
}

/// The networks (already bound into a graph) that make up the generator
/// objective. Which bindings are trainable is up to the caller.
pub struct GeneratorGraph<'a> {
    pub g_lf2hf: (&'a UNet, &'a Bound),
    pub g_hf2lf: (&'a UNet, &'a Bound),
    pub d_hf: (&'a PatchDiscriminator, &'a Bound),
    pub d_lf: (&'a PatchDiscriminator, &'a Bound),
    pub pretext: Option<(&'a UNet, &'a Bound, &'a BatchCorruption)>,
    pub weights: LossWeights,
    pub generator_override: GeneratorOverride,
}

impl GeneratorGraph<'_> {
    fn generate<T: Scalar>(&self, g: &mut Graph<T>, net: (&UNet, &Bound), x: Var) -> Result<Var, TrainError> {
        match self.generator_override {
            GeneratorOverride::None => Ok(net.0.forward(g, net.1, x)?),
            GeneratorOverride::Identity => Ok(x),
        }
    }

    /// Builds the generator objective for an LF batch `x` and real HF batch `y`.
    pub fn build<T: Scalar>(&self, g: &mut Graph<T>, x: Var, y: Var) -> Result<GeneratorTerms, TrainError> {
        let fake_hf = self.generate(g, self.g_lf2hf, x)?;
        let rec_lf = self.generate(g, self.g_hf2lf, fake_hf)?;
        let fake_lf = self.generate(g, self.g_hf2lf, y)?;
        let rec_hf = self.generate(g, self.g_lf2hf, fake_lf)?;
        let c1 = g.mae(rec_lf, x)?;
        let c2 = g.mae(rec_hf, y)?;
        let cycle = g.weighted_sum(&[(c1, 1.0), (c2, 1.0)])?;
        let s_hf = self.d_hf.0.forward(g, self.d_hf.1, fake_hf)?;
        let s_lf = self.d_lf.0.forward(g, self.d_lf.1, fake_lf)?;
        let a1 = adversarial_g_term(g, s_hf);
        let a2 = adversarial_g_term(g, s_lf);
        let adv = g.weighted_sum(&[(a1, 1.0), (a2, 1.0)])?;
        let w = self.weights;
        let mut terms = vec![(cycle, w.lambda2), (adv, w.lambda3)];
        let mut syn = None;
        if let Some((et, pe, plan)) = self.pretext {
            // gradients reach G through both the corrupted input and the target
            let shape = g.value(fake_hf).shape().to_vec();
            let corrupted = g.gather(fake_hf, plan.map.clone(), plan.fill as f64, &shape)?;
            let recon = et.forward(g, pe, corrupted)?;
            let l = g.mse(fake_hf, recon)?;
            terms.insert(0, (l, w.lambda1));
            syn = Some(l);
        }
        let total = g.weighted_sum(&terms)?;
        Ok(GeneratorTerms {
            fake_hf,
            fake_lf,
            cycle,
            adv,
            syn,
            total,
        })
    }
}

fn check_params(step: u64, m: &PtaModels) -> Result<(), TrainError> {
    if m.all_finite() {
        Ok(())
    } else {
        Err(TrainError::NonFinite {
            step,
            detail: "network parameters after update".into(),
        })
    }
}

/// Unpaired adversarial training. Each step samples an LF batch and an
/// independently shuffled HF batch; with `use_sgp` the HF batch is reordered
/// by embedding similarity before serving as the discriminator's real set.
/// Both generators are updated on `λ₁·L_syn + λ₂·L_cycle + λ₃·L_adv`, then the
/// discriminators on detached fakes. `encoder` and `pretext` stay frozen.
#[allow(clippy::too_many_arguments)]
pub fn train_pta<L: SliceSource + ?Sized, H: SliceSource + ?Sized>(
    lf: &L,
    hf: &H,
    encoder: Option<&Network<Encoder>>,
    pretext: Option<&Network<UNet>>,
    cfg: &TrainConfig,
    opts: &PtaOptions,
    on_step: &mut dyn FnMut(u64, &PtaModels, &LossReport) -> Result<(), TrainError>,
) -> Result<(PtaModels, Vec<LossReport>), TrainError> {
    cfg.validate()?;
    let encoder = match (cfg.ablation.use_sgp, encoder) {
        (true, None) => return Err(TrainError::Config("use_sgp requires a pretrained encoder checkpoint".into())),
        (true, Some(e)) => Some(e),
        (false, _) => None,
    };
    let pretext = match (cfg.ablation.use_lsc, pretext) {
        (true, None) => return Err(TrainError::Config("use_lsc requires a pretrained pretext checkpoint".into())),
        (true, Some(p)) => Some(p),
        (false, _) => None,
    };
    if lf.is_empty() || hf.is_empty() {
        return Err(TrainError::Config("adversarial training needs non-empty LF and HF datasets".into()));
    }
    let (h, w) = lf.dims();
    if hf.dims() != (h, w) {
        return Err(TrainError::Config("LF and HF datasets differ in slice dimensions".into()));
    }
    cfg.network.check_size(h, w)?;
    let ov = opts.generator_override;
    let wts = cfg.weights;
    let context = cfg.network.context_slices;
    let n = cfg.batch_size;

    let mut m = PtaModels::new(&cfg.network)?;
    let mut opt_g = Optimizer::new(cfg.optimizer, &m.g_lf2hf.params);
    let mut opt_f = Optimizer::new(cfg.optimizer, &m.g_hf2lf.params);
    let mut opt_dh = Optimizer::new(cfg.optimizer, &m.d_hf.params);
    let mut opt_dl = Optimizer::new(cfg.optimizer, &m.d_lf.params);
    let train_g = ov == GeneratorOverride::None;
    let mut history = Vec::with_capacity(cfg.iterations as usize);

    for step in 0..cfg.iterations {
        let lf_idx = sample_batch(lf.len(), n, cfg.seed, "pta-lf", step)?;
        let hf_idx = sample_batch(hf.len(), n, cfg.seed, "pta-hf", step)?;
        let x = lf.batch(&lf_idx)?;
        let y = match encoder {
            Some(enc) => {
                let e_lf = embed(enc, context, lf, &lf_idx)?;
                let e_hf = embed(enc, context, hf, &hf_idx)?;
                let assign = match_embeddings(&e_lf, &e_hf, cfg.match_rule)?;
                let order: Vec<usize> = assign.hf_indices().iter().map(|&j| hf_idx[j]).collect();
                hf.batch(&order)?
            }
            None => hf.batch(&hf_idx)?,
        };
        let mut report = LossReport::new(step, &wts);

        // generator update
        let mut g = Graph::<f32>::new();
        let pg = g.bind(&m.g_lf2hf.params, train_g);
        let pf = g.bind(&m.g_hf2lf.params, train_g);
        let pdh = g.bind(&m.d_hf.params, false);
        let pdl = g.bind(&m.d_lf.params, false);
        let plan = match pretext {
            Some(_) => Some(corrupt_batch_plan(
                n,
                h,
                w,
                &cfg.corruption,
                derive_seed(cfg.seed, &[hash_str("pta-corrupt"), step]),
            )?),
            None => None,
        };
        let pe = pretext.map(|et| g.bind(&et.params, false));
        let graph = GeneratorGraph {
            g_lf2hf: (&m.g_lf2hf.arch, &pg),
            g_hf2lf: (&m.g_hf2lf.arch, &pf),
            d_hf: (&m.d_hf.arch, &pdh),
            d_lf: (&m.d_lf.arch, &pdl),
            pretext: match (pretext, &pe, &plan) {
                (Some(et), Some(pe), Some(plan)) => Some((&et.arch, pe, plan)),
                _ => None,
            },
            weights: wts,
            generator_override: ov,
        };
        let xv = g.constant(x.clone());
        let yv = g.constant(y.clone());
        let terms = graph.build(&mut g, xv, yv)?;
        report.syn = terms.syn.map(|v| g.scalar(v));
        report.cycle = Some(g.scalar(terms.cycle));
        report.adv_g = Some(g.scalar(terms.adv));
        report.total = Some(g.scalar(terms.total));
        check_finite(step, &report)?;
        if train_g {
            let mut grads = g.backward(terms.total)?;
            let gg = grads.for_params(&pg, &m.g_lf2hf.params);
            let gf = grads.for_params(&pf, &m.g_hf2lf.params);
            opt_g.step(&mut m.g_lf2hf.params, &gg);
            opt_f.step(&mut m.g_hf2lf.params, &gf);
        }
        let (fake_hf, fake_lf) = (terms.fake_hf, terms.fake_lf);
        let fake_hf_v: Tensor<f32> = g.value(fake_hf).clone();
        let fake_lf_v: Tensor<f32> = g.value(fake_lf).clone();
        drop(g);

        // discriminator update on detached fakes
        for k in 0..cfg.d_updates_per_step {
            let mut g = Graph::<f32>::new();
            let pdh = g.bind(&m.d_hf.params, true);
            let pdl = g.bind(&m.d_lf.params, true);
            let real_hf = g.constant(y.clone());
            let real_lf = g.constant(x.clone());
            let fh = g.constant(fake_hf_v.clone());
            let fl = g.constant(fake_lf_v.clone());
            let r_hf = m.d_hf.arch.forward(&mut g, &pdh, real_hf)?;
            let f_hf = m.d_hf.arch.forward(&mut g, &pdh, fh)?;
            let r_lf = m.d_lf.arch.forward(&mut g, &pdl, real_lf)?;
            let f_lf = m.d_lf.arch.forward(&mut g, &pdl, fl)?;
            let l_hf = adversarial_d_term(&mut g, r_hf, f_hf);
            let l_lf = adversarial_d_term(&mut g, r_lf, f_lf);
            let ld = g.weighted_sum(&[(l_hf, 1.0), (l_lf, 1.0)])?;
            if k == 0 {
                report.adv_d = Some(g.scalar(ld));
                check_finite(step, &report)?;
            }
            let mut grads = g.backward(ld)?;
            let gh = grads.for_params(&pdh, &m.d_hf.params);
            let gl = grads.for_params(&pdl, &m.d_lf.params);
            opt_dh.step(&mut m.d_hf.params, &gh);
            opt_dl.step(&mut m.d_lf.params, &gl);
        }
        check_params(step, &m)?;
        on_step(step, &m, &report)?;
        history.push(report);
    }
    Ok((m, history))
}
