//! Oracle checks shared by the `selftest` command and the acceptance harness.
//! Each check returns a named pass/fail result with a short diagnostic.

use std::fmt;

use nalgebra::DMatrix;
use rand::Rng as _;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::corruption::{
    apply_record, corrupt_batch_plan, gather_map, invert_corruption, partition, sample_record, CorruptionParams,
    Orientation,
};
use crate::data::{Contrast, IntensityRange, Slice};
use crate::losses::{adversarial_losses, cycle_loss, lsc_loss, sgp_contrastive_loss};
use crate::metrics::{fid, inception_score, matrix_sqrt_psd, ms_ssim_pixels, FeatureSet};
use crate::nets::{
    build_discriminator, build_encoder, build_unet, component, gradcheck, GradcheckConfig, NetworkConfig, Precision,
};
use crate::oracle::{self, GeneratorObjective, LscObjective, SgpObjective};
use crate::params::ParamStore;
use crate::rng::{rng_for, Rng};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl CheckResult {
    fn new(name: &str, passed: bool, detail: impl Into<String>) -> Self {
        Self {
            name: name.to_string(),
            passed,
            detail: detail.into(),
        }
    }
}

impl fmt::Display for CheckResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let tag = if self.passed { "PASS" } else { "FAIL" };
        write!(f, "{tag} {}: {}", self.name, self.detail)
    }
}

/// Deliberate defects for checking that the oracles notice them.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fault {
    /// Corrupt with clockwise quarter turns while inverting as counter-clockwise.
    RotationConvention,
}

fn normal_vec(rng: &mut Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

fn t64(shape: &[usize], data: Vec<f64>) -> Tensor<f64> {
    Tensor::from_vec(shape, data).expect("shape matches data")
}

/// Graph-based losses against the scalar loop oracles on random small inputs.
pub fn check_loss_oracles(trials: usize, seed: u64) -> CheckResult {
    let mut rng = rng_for(seed, &[0x1055]);
    let mut worst: f64 = 0.0;
    let mut failure = None;
    for t in 0..trials {
        let n = rng.random_range(1..=8);
        let d = rng.random_range(1..=16);
        let tau = rng.random_range(0.05..1.0);
        let lf = normal_vec(&mut rng, n * d);
        let hf = normal_vec(&mut rng, n * d);
        let px = rng.random_range(1..=64);
        let a: Vec<f64> = (0..n * px).map(|_| rng.random_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..n * px).map(|_| rng.random_range(-1.0..1.0)).collect();
        let real = normal_vec(&mut rng, n * 4);
        let fake = normal_vec(&mut rng, n * 4);
        let got = (|| -> Result<[(f64, f64); 5], crate::losses::LossError> {
            let (ld, lg) = adversarial_losses(&t64(&[n, 1, 2, 2], real.clone()), &t64(&[n, 1, 2, 2], fake.clone()))?;
            let (od, og) = oracle::adversarial(&real, &fake);
            Ok([
                (
                    sgp_contrastive_loss(&t64(&[n, d], lf.clone()), &t64(&[n, d], hf.clone()), tau)?,
                    oracle::sgp_loss(&lf, &hf, n, d, tau),
                ),
                (lsc_loss(&t64(&[n, px], a.clone()), &t64(&[n, px], b.clone()))?, oracle::mean_squared(&a, &b)),
                (cycle_loss(&t64(&[n, px], a.clone()), &t64(&[n, px], b.clone()))?, oracle::mean_abs(&a, &b)),
                (ld, od),
                (lg, og),
            ])
        })();
        match got {
            Ok(pairs) => {
                for (k, (x, y)) in pairs.iter().enumerate() {
                    let err = (x - y).abs();
                    worst = worst.max(err);
                    if !(err <= 1e-6) && failure.is_none() {
                        let which = ["sgp", "lsc", "cycle", "adv_d", "adv_g"][k];
                        failure = Some(format!("trial {t} {which}: {x} vs oracle {y}"));
                    }
                }
            }
            Err(e) => {
                failure.get_or_insert(format!("trial {t}: {e}"));
            }
        }
    }
    match failure {
        None => CheckResult::new("loss-oracles", true, format!("{trials} trials, max |Δ| = {worst:.2e}")),
        Some(f) => CheckResult::new("loss-oracles", false, f),
    }
}

/// `ln N` for identical embeddings, 0 for a single pair, and a loss that falls
/// as the positive similarity rises.
pub fn check_contrastive_analytic() -> CheckResult {
    let mut notes = Vec::new();
    let mut ok = true;
    for n in [2usize, 4, 8] {
        let e = t64(&[n, 3], [0.3, -1.2, 0.5].repeat(n));
        let l = sgp_contrastive_loss(&e, &e, 0.1).unwrap_or(f64::NAN);
        let err = (l - (n as f64).ln()).abs();
        ok &= err <= 1e-6;
        notes.push(format!("N={n} |Δ|={err:.1e}"));
    }
    let one = sgp_contrastive_loss(&t64(&[1, 2], vec![1.0, 2.0]), &t64(&[1, 2], vec![-3.0, 0.5]), 0.1).unwrap_or(f64::NAN);
    ok &= one.abs() <= 1e-12;
    notes.push(format!("N=1 loss={one:.1e}"));
    // N = 3: rotate the first positive towards its anchor
    let mut prev = f64::INFINITY;
    let mut monotone = true;
    for k in 0..=10 {
        let theta = std::f64::consts::FRAC_PI_2 * (1.0 - k as f64 / 10.0);
        let lf = t64(&[3, 2], vec![1.0, 0.0, 0.0, 1.0, -1.0, 0.0]);
        let hf = t64(&[3, 2], vec![theta.cos(), theta.sin(), 0.0, 1.0, -1.0, 0.0]);
        let l = sgp_contrastive_loss(&lf, &hf, 0.5).unwrap_or(f64::NAN);
        monotone &= l < prev;
        prev = l;
    }
    ok &= monotone;
    notes.push(format!("monotone={monotone}"));
    CheckResult::new("contrastive-analytic", ok, notes.join(", "))
}

/// Corrupt-then-invert is the identity, bit for bit, over random slices,
/// seeds and fractions (boundary fractions included). Also checks record
/// disjointness, that pixels outside touched blocks are unchanged, and that
/// the in-graph gather route matches the block route.
pub fn check_corruption_inversion(trials: usize, seed: u64, fault: Option<Fault>) -> Vec<CheckResult> {
    let orientation = match fault {
        Some(Fault::RotationConvention) => Orientation::Clockwise,
        None => Orientation::CounterClockwise,
    };
    let mut rng = rng_for(seed, &[0xC0_22]);
    let boundary = [(0.0, 0.0), (0.5, 0.5), (1.0, 0.0), (0.0, 1.0)];
    let (mut inv_fail, mut inv_local, mut route_fail) = (None, None, None);
    for t in 0..trials {
        let bs = [2usize, 4, 8][rng.random_range(0..3)];
        let h = bs * rng.random_range(1..=8);
        let w = bs * rng.random_range(1..=8);
        let (rf, mf) = if t < boundary.len() {
            boundary[t]
        } else {
            let r: f64 = rng.random_range(0.0..1.0);
            (r, rng.random_range(0.0..=(1.0 - r)))
        };
        let params = CorruptionParams {
            block_size: bs,
            rotate_fraction: rf,
            mask_fraction: mf,
            fill: 0.0,
        };
        let pixels: Vec<f32> = (0..h * w).map(|_| rng.random_range(0.0..1.0)).collect();
        let s = Slice::new(h, w, pixels, IntensityRange::Unit, Contrast::T1, "selftest", t).expect("valid slice");
        let grid = partition(h, w, bs).expect("divisible");
        let cseed = rng.random::<u64>();
        let rec = match sample_record(&grid, &params, cseed) {
            Ok(r) => r,
            Err(e) => {
                inv_fail.get_or_insert(format!("trial {t}: {e}"));
                continue;
            }
        };
        if let Err(e) = rec.validate(&grid) {
            inv_local.get_or_insert(format!("trial {t}: {e}"));
        }
        let corrupted = apply_record(&s.pixels, h, w, &rec, orientation).expect("valid record");
        // locality: untouched blocks are unchanged
        let mut touched = vec![false; h * w];
        for b in rec.rotated.iter().map(|r| r.index()).chain(rec.masked.iter().copied()) {
            for r in 0..bs {
                for c in 0..bs {
                    touched[(b.row * bs + r) * w + b.col * bs + c] = true;
                }
            }
        }
        if (0..h * w).any(|k| !touched[k] && corrupted[k].to_bits() != s.pixels[k].to_bits()) {
            inv_local.get_or_insert(format!("trial {t}: pixel outside corrupted blocks changed"));
        }
        let c = s.with_pixels(corrupted.clone(), s.intensity_range);
        match invert_corruption(&c, &rec, &s) {
            Ok(back) => {
                let same = back.pixels.iter().zip(&s.pixels).all(|(a, b)| a.to_bits() == b.to_bits());
                if !same {
                    inv_fail.get_or_insert(format!("trial {t}: inverse differs ({h}x{w}, block {bs}, seed {cseed})"));
                }
            }
            Err(e) => {
                inv_fail.get_or_insert(format!("trial {t}: {e}"));
            }
        }
        let mut map = Vec::new();
        gather_map(h, w, &rec, 0, &mut map).expect("valid record");
        let routed: Vec<f32> = map
            .iter()
            .map(|&m| if m == crate::autodiff::GATHER_FILL { rec.fill_value } else { s.pixels[m as usize] })
            .collect();
        if routed.iter().zip(&corrupted).any(|(a, b)| a.to_bits() != b.to_bits()) {
            route_fail.get_or_insert(format!("trial {t}: gather map disagrees with block copy"));
        }
    }
    let res = |name: &str, f: Option<String>| match f {
        None => CheckResult::new(name, true, format!("{trials} trials")),
        Some(d) => CheckResult::new(name, false, d),
    };
    vec![
        res("corruption-inversion", inv_fail),
        res("corruption-locality", inv_local),
        res("corruption-gather-route", route_fail),
    ]
}

/// Sizes for [`check_metric_analytic`].
#[derive(Debug, Clone, Copy)]
pub struct MetricCheckSizes {
    pub stochastic_matrices: usize,
    pub gaussian_samples: usize,
    pub max_sqrt_dim: usize,
    pub ssim_pairs: usize,
}

impl Default for MetricCheckSizes {
    fn default() -> Self {
        Self {
            stochastic_matrices: 1000,
            gaussian_samples: 10_000,
            max_sqrt_dim: 64,
            ssim_pairs: 10,
        }
    }
}

/// FID, IS, MS-SSIM and matrix square root against analytic values.
pub fn check_metric_analytic(seed: u64, sizes: MetricCheckSizes) -> Vec<CheckResult> {
    let mut rng = rng_for(seed, &[0x3E7]);
    let mut out = Vec::new();

    // FID identity and the equal-covariance Gaussian closed form
    let d = 4;
    let n = sizes.gaussian_samples;
    let a = FeatureSet::new(n, d, normal_vec(&mut rng, n * d), "selftest").expect("finite");
    let mu = [1.0, -0.5, 0.75, 0.25];
    let shifted: Vec<f64> = normal_vec(&mut rng, n * d)
        .into_iter()
        .enumerate()
        .map(|(k, v)| v + mu[k % d])
        .collect();
    let b = FeatureSet::new(n, d, shifted, "selftest").expect("finite");
    let self_fid = fid(&a, &a).unwrap_or(f64::NAN);
    let expected: f64 = mu.iter().map(|m| m * m).sum();
    let gauss = fid(&a, &b).unwrap_or(f64::NAN);
    let sym = (gauss - fid(&b, &a).unwrap_or(f64::NAN)).abs();
    let rel = (gauss - expected).abs() / expected;
    out.push(CheckResult::new(
        "fid-analytic",
        self_fid.abs() <= 1e-6 && rel <= 0.05 && sym <= 1e-6,
        format!("fid(a,a)={self_fid:.1e}, gaussian {gauss:.4} vs {expected:.4} ({:.2}%), asym {sym:.1e}", rel * 100.0),
    ));

    // IS bounds and oracle agreement on random stochastic matrices
    let mut is_fail = None;
    let mut max_oracle: f64 = 0.0;
    for t in 0..sizes.stochastic_matrices {
        let k = rng.random_range(2..=10);
        let rows = rng.random_range(2..=40);
        let sharp = rng.random_range(0.1..5.0);
        let mut p = Vec::with_capacity(rows * k);
        for _ in 0..rows {
            let e: Vec<f64> = (0..k).map(|_| (sharp * rng.sample::<f64, _>(StandardNormal)).exp()).collect();
            let s: f64 = e.iter().sum();
            p.extend(e.iter().map(|v| v / s));
        }
        match inception_score(&p, rows, k, 1) {
            Ok((m, _)) => {
                let o = oracle::inception_score(&p, rows, k);
                max_oracle = max_oracle.max((m - o).abs());
                if m < 1.0 - 1e-6 || m > k as f64 + 1e-6 || (m - o).abs() > 1e-6 {
                    is_fail.get_or_insert(format!("matrix {t}: IS {m} (oracle {o}, K {k})"));
                }
            }
            Err(e) => {
                is_fail.get_or_insert(format!("matrix {t}: {e}"));
            }
        }
    }
    let k = 8;
    let uniform = vec![1.0 / k as f64; k * 16];
    let u = inception_score(&uniform, 16, k, 4).map(|r| r.0).unwrap_or(f64::NAN);
    let mut onehot = vec![0.0; k * k];
    for i in 0..k {
        onehot[i * k + i] = 1.0;
    }
    let o = inception_score(&onehot, k, k, 1).map(|r| r.0).unwrap_or(f64::NAN);
    if (u - 1.0).abs() > 1e-12 || (o - k as f64).abs() > 1e-6 {
        is_fail.get_or_insert(format!("uniform rows {u}, balanced one-hot {o}"));
    }
    out.push(match is_fail {
        None => CheckResult::new(
            "inception-score",
            true,
            format!("{} matrices in [1, K], oracle |Δ| ≤ {max_oracle:.1e}", sizes.stochastic_matrices),
        ),
        Some(f) => CheckResult::new("inception-score", false, f),
    });

    // MS-SSIM identity and symmetry
    let mut ss_fail = None;
    for t in 0..sizes.ssim_pairs {
        let x: Vec<f32> = (0..64 * 64).map(|_| rng.random_range(-1.0..1.0)).collect();
        let y: Vec<f32> = x.iter().map(|v| (v * 0.7 + rng.random_range(-0.2..0.2)).clamp(-1.0, 1.0)).collect();
        let xx = ms_ssim_pixels(&x, &x, 64, 64, 2.0, 3).unwrap_or(f64::NAN);
        let xy = ms_ssim_pixels(&x, &y, 64, 64, 2.0, 3).unwrap_or(f64::NAN);
        let yx = ms_ssim_pixels(&y, &x, 64, 64, 2.0, 3).unwrap_or(f64::NAN);
        if (xx - 1.0).abs() > 1e-6 || (xy - yx).abs() > 1e-6 || !(0.0..=1.0).contains(&xy) {
            ss_fail.get_or_insert(format!("pair {t}: self {xx}, ab {xy}, ba {yx}"));
        }
    }
    out.push(match ss_fail {
        None => CheckResult::new("ms-ssim-identity", true, format!("{} pairs", sizes.ssim_pairs)),
        Some(f) => CheckResult::new("ms-ssim-identity", false, f),
    });

    // matrix square root reconstruction
    let mut worst: f64 = 0.0;
    let mut dims = vec![1usize, 2, 3, 8, 16, 32];
    dims.push(sizes.max_sqrt_dim);
    for &dim in &dims {
        let g = DMatrix::from_fn(dim, dim, |_, _| rng.sample::<f64, _>(StandardNormal));
        let m = g.transpose() * &g;
        let r = matrix_sqrt_psd(&m).map(|r| (&r * &r - &m).norm() / m.norm().max(1.0));
        worst = worst.max(r.unwrap_or(f64::INFINITY));
    }
    out.push(CheckResult::new(
        "matrix-sqrt",
        worst <= 1e-5,
        format!("max relative reconstruction error {worst:.1e} up to d={}", sizes.max_sqrt_dim),
    ));
    out
}

/// Sizes for [`check_gradients`].
#[derive(Debug, Clone, Copy)]
pub struct GradientCheckSizes {
    pub network: NetworkConfig,
    pub image_size: usize,
    pub batch: usize,
    pub samples: usize,
}

impl Default for GradientCheckSizes {
    fn default() -> Self {
        Self {
            network: NetworkConfig {
                base_channels: 4,
                depth: 2,
                embed_dim: 8,
                ..Default::default()
            },
            image_size: 16,
            batch: 2,
            samples: 32,
        }
    }
}

fn batch64(rng: &mut Rng, n: usize, c: usize, size: usize) -> Tensor<f64> {
    let d = Normal::new(0.0, 0.5).expect("valid normal");
    let data = (0..n * c * size * size).map(|_| Distribution::<f64>::sample(&d, rng).clamp(-1.0, 1.0)).collect();
    t64(&[n, c, size, size], data)
}

/// Autodiff versus finite differences for the contrastive loss through the
/// encoder, the pretext loss through `E_T` and the total generator objective,
/// in single precision (tolerance 1e-3) and double precision (1e-5).
pub fn check_gradients(sizes: GradientCheckSizes, seed: u64) -> Vec<CheckResult> {
    let cfg = sizes.network;
    let (n, s) = (sizes.batch, sizes.image_size);
    let mut rng = rng_for(seed, &[0x62AD]);
    let mut out = Vec::new();
    let mut run = |name: &str, obj: &dyn Fn(&GradcheckConfig) -> Result<crate::nets::GradcheckReport, crate::nets::NetError>| {
        for (precision, tol, tag) in [(Precision::Single, 1e-3, "f32"), (Precision::Double, 1e-5, "f64")] {
            let gc = GradcheckConfig {
                epsilon: 1e-3,
                samples: sizes.samples,
                tolerance: tol,
                precision,
                seed,
            };
            out.push(match obj(&gc) {
                Ok(r) => CheckResult::new(
                    &format!("gradcheck-{name}-{tag}"),
                    r.passed && r.checked >= sizes.samples.min(32),
                    format!(
                        "{} params, max rel err {:.2e} (tol {tol:.0e}), worst #{} ad {:.3e} fd {:.3e}",
                        r.checked, r.max_relative_error, r.worst.0, r.worst.1, r.worst.2
                    ),
                ),
                Err(e) => CheckResult::new(&format!("gradcheck-{name}-{tag}"), false, e.to_string()),
            });
        }
    };

    let enc = build_encoder(&cfg, component::ENCODER).expect("valid config");
    let sgp = SgpObjective {
        encoder: enc.arch.clone(),
        lf: batch64(&mut rng, n.max(2), cfg.context_slices, s),
        hf: batch64(&mut rng, n.max(2), cfg.context_slices, s),
        tau: 0.1,
    };
    let enc_params: ParamStore<f64> = enc.params.cast();
    run("sgp", &|gc| gradcheck(&sgp, &enc_params, gc));

    let et = build_unet(&cfg, component::PRETEXT).expect("valid config");
    let params = CorruptionParams {
        block_size: s / 4,
        ..Default::default()
    };
    let plan = corrupt_batch_plan(n, s, s, &params, seed).expect("divisible");
    let lsc = LscObjective {
        net: et.arch.clone(),
        x: batch64(&mut rng, n, 1, s),
        map: plan.map.clone(),
        fill: plan.fill as f64,
    };
    let et_params: ParamStore<f64> = et.params.cast();
    run("lsc", &|gc| gradcheck(&lsc, &et_params, gc));

    let g = build_unet(&cfg, component::G_LF2HF).expect("valid config");
    let f = build_unet(&cfg, component::G_HF2LF).expect("valid config");
    let dh = build_discriminator(&cfg, component::D_HF).expect("valid config");
    let dl = build_discriminator(&cfg, component::D_LF).expect("valid config");
    let total = GeneratorObjective {
        g_lf2hf: g.arch.clone(),
        g_hf2lf: (f.arch.clone(), f.params.cast()),
        d_hf: (dh.arch.clone(), dh.params.cast()),
        d_lf: (dl.arch.clone(), dl.params.cast()),
        pretext: Some((et.arch.clone(), et.params.cast(), plan)),
        weights: Default::default(),
        x: batch64(&mut rng, n, 1, s),
        y: batch64(&mut rng, n, 1, s),
    };
    let g_params: ParamStore<f64> = g.params.cast();
    run("generator-total", &|gc| gradcheck(&total, &g_params, gc));
    out
}

/// The quick suite behind `pta selftest`.
pub fn run_selftest(fault: Option<Fault>) -> Vec<CheckResult> {
    let mut out = vec![check_loss_oracles(100, 0), check_contrastive_analytic()];
    out.extend(check_corruption_inversion(100, 0, fault));
    out.extend(check_metric_analytic(
        0,
        MetricCheckSizes {
            stochastic_matrices: 200,
            ..Default::default()
        },
    ));
    out.extend(check_gradients(GradientCheckSizes::default(), 0));
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rotation_fault_is_detected() {
        let ok = check_corruption_inversion(20, 1, None);
        assert!(ok.iter().all(|c| c.passed), "{ok:?}");
        let bad = check_corruption_inversion(20, 1, Some(Fault::RotationConvention));
        let inv = bad.iter().find(|c| c.name == "corruption-inversion").unwrap();
        assert!(!inv.passed);
    }
}
