mod common;

use std::cell::Cell;

use common::{datasets, phantom_config, small_net, train_config};
use pta_core::data::{DataError, SliceDataset};
use pta_core::losses::loss_csv_string;
use pta_core::nets::{Encoder, Network, Stage, UNet};
use pta_core::oracle;
use pta_core::tensor::Tensor;
use pta_core::training::{
    load_encoder, load_pretext, pretrain_lsc, pretrain_sgp, stage_checkpoint, synthesize, train_pta, Ablation,
    GeneratorOverride, PtaModels, PtaOptions, SliceSource, TrainConfig, TrainError,
};

/// Pass-through source that counts positional lookups.
struct Audited<'a> {
    inner: &'a SliceDataset,
    neighbor_calls: Cell<usize>,
}

impl<'a> Audited<'a> {
    fn new(inner: &'a SliceDataset) -> Self {
        Self {
            inner,
            neighbor_calls: Cell::new(0),
        }
    }
}

impl SliceSource for Audited<'_> {
    fn len(&self) -> usize {
        self.inner.len()
    }

    fn dims(&self) -> (usize, usize) {
        SliceSource::dims(self.inner)
    }

    fn batch(&self, indices: &[usize]) -> Result<Tensor<f32>, DataError> {
        self.inner.batch(indices)
    }

    fn neighbor(&self, i: usize, offset: isize) -> usize {
        self.neighbor_calls.set(self.neighbor_calls.get() + 1);
        self.inner.neighbor(i, offset)
    }
}

fn pretrained(lf: &SliceDataset, hf: &SliceDataset) -> (Network<Encoder>, Network<UNet>) {
    let (enc, _) = pretrain_sgp(lf, hf, &train_config(Stage::Sgp, 2, Ablation::FULL), &mut |_, _, _| Ok(())).unwrap();
    let (et, _) = pretrain_lsc(hf, &train_config(Stage::Lsc, 2, Ablation::FULL), &mut |_, _, _| Ok(())).unwrap();
    (enc, et)
}

fn run<L: SliceSource + ?Sized, H: SliceSource + ?Sized>(
    lf: &L,
    hf: &H,
    nets: Option<&(Network<Encoder>, Network<UNet>)>,
    cfg: &TrainConfig,
    opts: &PtaOptions,
) -> (PtaModels, String) {
    let (m, hist) = train_pta(lf, hf, nets.map(|n| &n.0), nets.map(|n| &n.1), cfg, opts, &mut |_, _, _| Ok(())).unwrap();
    (m, loss_csv_string(&hist).unwrap())
}

/// Same pixels in the same order, positional metadata replaced.
fn anonymized(ds: &SliceDataset) -> SliceDataset {
    let n = ds.len();
    let slices = ds
        .slices
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let mut s = s.clone();
            s.volume_id = format!("anon{}", n - i);
            s.slice_index = (i * 7) % 5;
            s
        })
        .collect();
    SliceDataset::new(ds.meta.clone(), slices).unwrap()
}

#[test]
fn unpaired_stage_never_looks_up_slice_positions() {
    let (lf, hf) = datasets(&phantom_config(), 0..2);
    let nets = pretrained(&lf, &hf);
    let (a_lf, a_hf) = (Audited::new(&lf), Audited::new(&hf));
    run(&a_lf, &a_hf, Some(&nets), &train_config(Stage::Pta, 3, Ablation::FULL), &PtaOptions::default());
    assert_eq!(a_lf.neighbor_calls.get(), 0);
    assert_eq!(a_hf.neighbor_calls.get(), 0);
}

#[test]
fn positional_metadata_does_not_change_training() {
    let (lf, hf) = datasets(&phantom_config(), 0..2);
    let nets = pretrained(&lf, &hf);
    let cfg = train_config(Stage::Pta, 3, Ablation::FULL);
    let (m1, csv1) = run(&lf, &hf, Some(&nets), &cfg, &PtaOptions::default());
    let (m2, csv2) = run(&anonymized(&lf), &anonymized(&hf), Some(&nets), &cfg, &PtaOptions::default());
    assert_eq!(csv1, csv2);
    let (h, w) = SliceSource::dims(&lf);
    assert_eq!(
        m1.checkpoint(&cfg.network, h, w).sha256(),
        m2.checkpoint(&cfg.network, h, w).sha256()
    );
}

#[test]
fn identity_generators_give_zero_cycle_and_real_vs_real_discriminator_loss() {
    let (lf, hf) = datasets(&phantom_config(), 0..2);
    let mut cfg = train_config(Stage::Pta, 2, Ablation::BACKBONE);
    // a full batch makes the discriminator terms independent of sampling order
    cfg.batch_size = lf.len();
    let opts = PtaOptions {
        generator_override: GeneratorOverride::Identity,
    };
    let (_, hist) = train_pta(&lf, &hf, None, None, &cfg, &opts, &mut |_, _, _| Ok(())).unwrap();
    for r in &hist {
        assert_eq!(r.cycle, Some(0.0), "step {}", r.iteration);
    }

    let fresh = PtaModels::new(&cfg.network).unwrap();
    let all: Vec<usize> = (0..lf.len()).collect();
    let (x, y) = (lf.batch(&all).unwrap(), hf.batch(&all).unwrap());
    let scores = |d: &Network<pta_core::nets::PatchDiscriminator>, t: &Tensor<f32>| -> Vec<f64> {
        d.infer(t).unwrap().data().iter().map(|&v| v as f64).collect()
    };
    let expected = oracle::adversarial(&scores(&fresh.d_hf, &y), &scores(&fresh.d_hf, &x)).0
        + oracle::adversarial(&scores(&fresh.d_lf, &x), &scores(&fresh.d_lf, &y)).0;
    let got = hist[0].adv_d.unwrap();
    assert!((got - expected).abs() <= 1e-5 * expected.abs().max(1.0), "{got} vs {expected}");
}

#[test]
fn pretrained_networks_stay_frozen() {
    let (lf, hf) = datasets(&phantom_config(), 0..2);
    let nets = pretrained(&lf, &hf);
    let before = nets.clone();
    run(&lf, &hf, Some(&nets), &train_config(Stage::Pta, 3, Ablation::FULL), &PtaOptions::default());
    assert_eq!(nets.0.params, before.0.params);
    assert_eq!(nets.1.params, before.1.params);
}

#[test]
fn runs_are_reproducible_and_seed_dependent() {
    let (lf, hf) = datasets(&phantom_config(), 0..2);
    let nets = pretrained(&lf, &hf);
    let cfg = train_config(Stage::Pta, 3, Ablation::FULL);
    let (h, w) = SliceSource::dims(&lf);
    let (m1, csv1) = run(&lf, &hf, Some(&nets), &cfg, &PtaOptions::default());
    let (m2, csv2) = run(&lf, &hf, Some(&nets), &cfg, &PtaOptions::default());
    assert_eq!(csv1, csv2);
    assert_eq!(
        m1.checkpoint(&cfg.network, h, w).sha256(),
        m2.checkpoint(&cfg.network, h, w).sha256()
    );
    let other = TrainConfig { seed: cfg.seed + 1, ..cfg.clone() };
    let (_, csv3) = run(&lf, &hf, Some(&nets), &other, &PtaOptions::default());
    assert_ne!(csv1, csv3);
}

#[test]
fn logged_terms_follow_the_ablation() {
    let (lf, hf) = datasets(&phantom_config(), 0..2);
    let nets = pretrained(&lf, &hf);
    for ab in [Ablation::BACKBONE, Ablation::SGP, Ablation::LSC, Ablation::FULL] {
        let cfg = train_config(Stage::Pta, 1, ab);
        let (_, hist) = train_pta(&lf, &hf, Some(&nets.0), Some(&nets.1), &cfg, &PtaOptions::default(), &mut |_, _, _| {
            Ok(())
        })
        .unwrap();
        let r = &hist[0];
        assert_eq!(r.syn.is_some(), ab.use_lsc, "{}", ab.label());
        assert!(r.cycle.is_some() && r.adv_g.is_some() && r.adv_d.is_some() && r.total.is_some());
        assert!(r.sgp.is_none() && r.lsc.is_none());
        let expected = r.lambda1 * r.syn.unwrap_or(0.0) + r.lambda2 * r.cycle.unwrap() + r.lambda3 * r.adv_g.unwrap();
        let total = r.total.unwrap();
        assert!((total - expected).abs() <= 1e-5 * expected.abs().max(1.0), "{total} vs {expected}");
    }
}

#[test]
fn missing_pretrained_networks_are_configuration_errors() {
    let (lf, hf) = datasets(&phantom_config(), 0..2);
    for ab in [Ablation::SGP, Ablation::LSC] {
        let cfg = train_config(Stage::Pta, 1, ab);
        let err = train_pta(&lf, &hf, None, None, &cfg, &PtaOptions::default(), &mut |_, _, _| Ok(())).unwrap_err();
        assert!(matches!(err, TrainError::Config(_)), "{}: {err}", ab.label());
    }
    let too_big = TrainConfig {
        batch_size: lf.len() + 1,
        ..train_config(Stage::Pta, 1, Ablation::BACKBONE)
    };
    let err = train_pta(&lf, &hf, None, None, &too_big, &PtaOptions::default(), &mut |_, _, _| Ok(())).unwrap_err();
    assert!(matches!(err, TrainError::Config(_)), "{err}");
}

#[test]
fn callback_errors_stop_training() {
    let (lf, hf) = datasets(&phantom_config(), 0..2);
    let cfg = train_config(Stage::Pta, 5, Ablation::BACKBONE);
    let mut seen = 0;
    let err = train_pta(&lf, &hf, None, None, &cfg, &PtaOptions::default(), &mut |step, _, _| {
        seen += 1;
        if step == 1 {
            Err(TrainError::Config("stop".into()))
        } else {
            Ok(())
        }
    })
    .unwrap_err();
    assert!(matches!(err, TrainError::Config(ref m) if m == "stop"));
    assert_eq!(seen, 2);
}

#[test]
fn stage_checkpoints_reload_with_their_stage() {
    let (lf, hf) = datasets(&phantom_config(), 0..2);
    let (enc, et) = pretrained(&lf, &hf);
    let dir = tempfile::tempdir().unwrap();
    let (h, w) = SliceSource::dims(&lf);

    let enc_cfg = train_config(Stage::Sgp, 2, Ablation::FULL);
    let path = dir.path().join("encoder.ckpt");
    stage_checkpoint(&enc, &enc_cfg, h, w).save(&path).unwrap();
    let ck = pta_core::nets::Checkpoint::load(&path).unwrap();
    let back = load_encoder(&ck).unwrap();
    let x = lf.batch(&[0, 1]).unwrap();
    assert_eq!(back.infer(&x).unwrap(), enc.infer(&x).unwrap());
    let stored: TrainConfig = serde_json::from_value(ck.extra.clone()).unwrap();
    assert_eq!(stored, enc_cfg);
    assert!(load_pretext(&ck).is_err());

    let et_cfg = train_config(Stage::Lsc, 2, Ablation::FULL);
    let ck = stage_checkpoint(&et, &et_cfg, h, w);
    let back = load_pretext(&ck).unwrap();
    assert_eq!(back.infer(&x).unwrap(), et.infer(&x).unwrap());
    assert!(load_encoder(&ck).is_err());
}

#[test]
fn synthesis_keeps_slice_identity_and_records_its_origin() {
    let (lf, hf) = datasets(&phantom_config(), 0..2);
    let cfg = train_config(Stage::Pta, 2, Ablation::BACKBONE);
    let (m, _) = run(&lf, &hf, None, &cfg, &PtaOptions::default());
    let (h, w) = SliceSource::dims(&lf);
    let ck = m.checkpoint(&small_net(), h, w);
    let sha = ck.sha256();
    let out = synthesize(&ck, &sha, &lf).unwrap();
    assert_eq!(out.len(), lf.len());
    for (a, b) in out.slices.iter().zip(&lf.slices) {
        assert_eq!(a.key(), b.key());
        assert!(a.pixels.iter().all(|v| (-1.0..=1.0).contains(v)));
    }
    let prov = out.meta.provenance.as_ref().unwrap();
    assert_eq!(prov["generator_sha256"], sha.as_str());
    assert_eq!(prov["source_sha256"], lf.content_hash().as_str());
    assert_eq!(synthesize(&ck, &sha, &lf).unwrap(), out);

    let (big_lf, _) = datasets(
        &pta_core::data::PhantomConfig {
            image_size: 64,
            ..phantom_config()
        },
        0..1,
    );
    assert!(matches!(synthesize(&ck, &sha, &big_lf), Err(TrainError::Config(_))));
}
