//! The learnable components: slice encoder, the two generators, the two patch
//! discriminators and the pretext reconstruction network.

mod arch;
pub mod checkpoint;
pub mod gradcheck;
mod layers;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{Bound, Graph, Var};
use crate::params::ParamStore;
use crate::rng::{hash_str, rng_for};
use crate::tensor::{Scalar, Tensor, TensorError};

pub use arch::{Encoder, PatchDiscriminator, UNet};
pub use checkpoint::{Checkpoint, CheckpointError, Stage};
pub use gradcheck::{gradcheck, GradcheckConfig, GradcheckReport, Objective, Precision};
pub use layers::ConvLayer;

#[derive(Debug, Error)]
pub enum NetError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("input {height}x{width} is not divisible by 2^{depth} = {}", 1usize << depth)]
    IncompatibleSize {
        height: usize,
        width: usize,
        depth: usize,
    },
    #[error("input to {0} contains non-finite values")]
    NonFiniteInput(&'static str),
    #[error("invalid network config: {0}")]
    Config(String),
    #[error("loss is not finite ({0})")]
    NonFiniteLoss(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormKind {
    Instance,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetworkConfig {
    pub base_channels: usize,
    pub depth: usize,
    pub embed_dim: usize,
    pub norm_kind: NormKind,
    /// Adjacent slices stacked as encoder input channels (odd, centred).
    pub context_slices: usize,
    /// UNets add their (inverse-tanh) input to the head before the output
    /// `tanh`, so a fresh network starts near the identity map.
    pub global_residual: bool,
    pub seed: u64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            base_channels: 16,
            depth: 3,
            embed_dim: 64,
            norm_kind: NormKind::Instance,
            context_slices: 1,
            global_residual: true,
            seed: 0,
        }
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<(), NetError> {
        if self.base_channels == 0 {
            return Err(NetError::Config("base_channels must be > 0".into()));
        }
        if self.depth == 0 || self.depth > 6 {
            return Err(NetError::Config("depth must be in 1..=6".into()));
        }
        if self.embed_dim == 0 {
            return Err(NetError::Config("embed_dim must be > 0".into()));
        }
        if self.context_slices.is_multiple_of(2) {
            return Err(NetError::Config("context_slices must be odd".into()));
        }
        Ok(())
    }

    /// Channel width at resolution level `level` (0 = full resolution).
    pub fn channels(&self, level: usize) -> usize {
        self.base_channels << level.min(2)
    }

    /// Checks that an `height × width` image survives `depth` halvings.
    pub fn check_size(&self, height: usize, width: usize) -> Result<(), NetError> {
        let f = 1usize << self.depth;
        if height == 0 || width == 0 || !height.is_multiple_of(f) || !width.is_multiple_of(f) {
            return Err(NetError::IncompatibleSize {
                height,
                width,
                depth: self.depth,
            });
        }
        Ok(())
    }
}

/// Component names; also the parameter-name prefixes inside checkpoints.
pub mod component {
    pub const ENCODER: &str = "encoder";
    pub const G_LF2HF: &str = "g_lf2hf";
    pub const G_HF2LF: &str = "g_hf2lf";
    pub const D_HF: &str = "d_hf";
    pub const D_LF: &str = "d_lf";
    pub const PRETEXT: &str = "pretext";
    pub const EXTRACTOR: &str = "extractor";
}

/// A network architecture whose parameters live in an external store.
pub trait Module {
    fn forward<T: Scalar>(&self, g: &mut Graph<T>, params: &Bound, x: Var) -> Result<Var, NetError>;
}

/// An architecture paired with its (single precision) parameters.
#[derive(Debug, Clone)]
pub struct Network<A> {
    pub arch: A,
    pub params: ParamStore<f32>,
}

impl<A: Module> Network<A> {
    /// Forward pass without gradient tracking.
    pub fn infer(&self, batch: &Tensor<f32>) -> Result<Tensor<f32>, NetError> {
        let mut g = Graph::new();
        let p = g.bind(&self.params, false);
        let x = g.constant(batch.clone());
        let y = self.arch.forward(&mut g, &p, x)?;
        Ok(g.value(y).clone())
    }
}

/// Deterministic seeded uniform init in `[-bound, bound]`.
pub(crate) fn uniform_tensor(shape: &[usize], bound: f64, rng: &mut impl rand::Rng) -> Tensor<f32> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| (rng.random::<f64>() * 2.0 - 1.0) * bound)
        .map(|v| v as f32)
        .collect();
    Tensor::from_vec(shape, data).expect("shape product")
}

fn component_rng(cfg: &NetworkConfig, name: &str) -> crate::rng::Rng {
    rng_for(cfg.seed, &[hash_str(name)])
}

pub fn build_unet(cfg: &NetworkConfig, name: &str) -> Result<Network<UNet>, NetError> {
    cfg.validate()?;
    let mut params = ParamStore::new();
    let arch = UNet::new(cfg, name, &mut params, &mut component_rng(cfg, name));
    Ok(Network { arch, params })
}

pub fn build_discriminator(cfg: &NetworkConfig, name: &str) -> Result<Network<PatchDiscriminator>, NetError> {
    cfg.validate()?;
    let mut params = ParamStore::new();
    let arch = PatchDiscriminator::new(cfg, name, &mut params, &mut component_rng(cfg, name));
    Ok(Network { arch, params })
}

pub fn build_encoder(cfg: &NetworkConfig, name: &str) -> Result<Network<Encoder>, NetError> {
    cfg.validate()?;
    let mut params = ParamStore::new();
    let arch = Encoder::new(cfg, name, cfg.context_slices, cfg.embed_dim, true, &mut params, &mut component_rng(cfg, name));
    Ok(Network { arch, params })
}

/// All six components initialised from one config.
#[derive(Debug, Clone)]
pub struct NetworkBundle {
    pub config: NetworkConfig,
    pub encoder: Network<Encoder>,
    pub generator_lf2hf: Network<UNet>,
    pub generator_hf2lf: Network<UNet>,
    pub discriminator_hf: Network<PatchDiscriminator>,
    pub discriminator_lf: Network<PatchDiscriminator>,
    pub pretext: Network<UNet>,
}

impl NetworkBundle {
    pub fn new(config: NetworkConfig) -> Result<Self, NetError> {
        Ok(Self {
            config,
            encoder: build_encoder(&config, component::ENCODER)?,
            generator_lf2hf: build_unet(&config, component::G_LF2HF)?,
            generator_hf2lf: build_unet(&config, component::G_HF2LF)?,
            discriminator_hf: build_discriminator(&config, component::D_HF)?,
            discriminator_lf: build_discriminator(&config, component::D_LF)?,
            pretext: build_unet(&config, component::PRETEXT)?,
        })
    }

    pub fn all_finite(&self) -> bool {
        [
            &self.encoder.params,
            &self.generator_lf2hf.params,
            &self.generator_hf2lf.params,
            &self.discriminator_hf.params,
            &self.discriminator_lf.params,
            &self.pretext.params,
        ]
        .iter()
        .all(|p| p.all_finite())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn batch(n: usize, h: usize, w: usize, seed: u64) -> Tensor<f32> {
        let data = (0..n * h * w)
            .map(|i| (((i as u64 * 2654435761 + seed) % 2001) as f32 / 1000.0) - 1.0)
            .collect();
        Tensor::from_vec(&[n, 1, h, w], data).unwrap()
    }

    #[test]
    fn encoder_rows_are_unit_norm() {
        let net = build_encoder(&NetworkConfig::default(), "encoder").unwrap();
        let out = net.infer(&batch(4, 64, 64, 1)).unwrap();
        assert_eq!(out.shape(), &[4, 64]);
        for row in out.data().chunks(64) {
            let n: f32 = row.iter().map(|v| v * v).sum::<f32>().sqrt();
            assert!((n - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn encoder_duplicate_inputs_give_identical_rows() {
        let net = build_encoder(&NetworkConfig::default(), "encoder").unwrap();
        let one = batch(1, 32, 32, 5);
        let mut data = one.data().to_vec();
        data.extend_from_slice(one.data());
        let two = Tensor::from_vec(&[2, 1, 32, 32], data).unwrap();
        let out = net.infer(&two).unwrap();
        assert_eq!(&out.data()[..64], &out.data()[64..]);
    }

    #[test]
    fn encoder_rejects_non_finite_input() {
        let net = build_encoder(&NetworkConfig::default(), "encoder").unwrap();
        let mut x = batch(1, 16, 16, 2);
        x.data_mut()[3] = f32::NAN;
        assert!(matches!(net.infer(&x), Err(NetError::NonFiniteInput(_))));
    }

    #[test]
    fn generator_preserves_shape_and_range() {
        let net = build_unet(&NetworkConfig::default(), "g").unwrap();
        let out = net.infer(&batch(2, 64, 64, 3)).unwrap();
        assert_eq!(out.shape(), &[2, 1, 64, 64]);
        assert!(out.data().iter().all(|v| (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn pretext_shape_preserving() {
        let net = build_unet(&NetworkConfig::default(), component::PRETEXT).unwrap();
        let out = net.infer(&batch(3, 64, 64, 9)).unwrap();
        assert_eq!(out.shape(), &[3, 1, 64, 64]);
        assert!(out.data().iter().all(|v| (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn generator_rejects_indivisible_size() {
        let net = build_unet(&NetworkConfig::default(), "g").unwrap();
        assert!(matches!(
            net.infer(&batch(1, 20, 64, 0)),
            Err(NetError::IncompatibleSize { .. })
        ));
    }

    #[test]
    fn seeded_init_is_reproducible() {
        let cfg = NetworkConfig::default();
        let a = build_unet(&cfg, "g").unwrap();
        let b = build_unet(&cfg, "g").unwrap();
        assert_eq!(a.params, b.params);
        let x = batch(1, 32, 32, 4);
        assert_eq!(a.infer(&x).unwrap(), b.infer(&x).unwrap());
        let c = build_unet(&NetworkConfig { seed: 1, ..cfg }, "g").unwrap();
        assert_ne!(a.params, c.params);
    }

    #[test]
    fn discriminator_patch_map_shape() {
        let net = build_discriminator(&NetworkConfig::default(), "d").unwrap();
        let out = net.infer(&batch(2, 64, 64, 7)).unwrap();
        assert_eq!(out.shape(), &[2, 1, 8, 8]);
        assert!(out.all_finite());
    }

    #[test]
    fn discriminator_is_per_sample() {
        let net = build_discriminator(&NetworkConfig::default(), "d").unwrap();
        let x = batch(3, 32, 32, 8);
        let y = net.infer(&x).unwrap();
        let perm = [2, 0, 1];
        let yp = net.infer(&x.select_rows(&perm).unwrap()).unwrap();
        assert_eq!(yp, y.select_rows(&perm).unwrap());
    }

    #[test]
    fn bundle_parameter_names_are_unique_and_finite() {
        let b = NetworkBundle::new(NetworkConfig::default()).unwrap();
        assert!(b.all_finite());
        let names: Vec<&str> = b.generator_lf2hf.params.iter().map(|(_, n, _)| n).collect();
        let mut dedup = names.clone();
        dedup.sort();
        dedup.dedup();
        assert_eq!(names.len(), dedup.len());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(12))]
        #[test]
        fn shape_contracts_hold_for_small_configs(
            base in 1usize..5, depth in 1usize..4, embed in 1usize..9,
            n in 1usize..3, mult in 1usize..3, instance in any::<bool>(), residual in any::<bool>(), seed in 0u64..100,
        ) {
            let cfg = NetworkConfig {
                base_channels: base,
                depth,
                embed_dim: embed,
                norm_kind: if instance { NormKind::Instance } else { NormKind::None },
                context_slices: 1,
                global_residual: residual,
                seed,
            };
            let side = (1usize << depth) * mult * 2;
            let x = batch(n, side, side, seed);
            let g = build_unet(&cfg, "g").unwrap().infer(&x).unwrap();
            prop_assert_eq!(g.shape(), &[n, 1, side, side]);
            prop_assert!(g.data().iter().all(|v| (-1.0..=1.0).contains(v)));
            let d = build_discriminator(&cfg, "d").unwrap().infer(&x).unwrap();
            prop_assert_eq!(d.shape(), &[n, 1, side >> depth, side >> depth]);
            let e = build_encoder(&cfg, "e").unwrap().infer(&x).unwrap();
            prop_assert_eq!(e.shape(), &[n, embed]);
        }
    }
}
