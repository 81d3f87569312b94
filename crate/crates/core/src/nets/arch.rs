use crate::autodiff::{Bound, Graph, Var};
use crate::params::ParamStore;
use crate::tensor::Scalar;

use super::layers::{ConvLayer, LinearLayer};
use super::{Module, NetError, NetworkConfig, NormKind};

fn input_dims<T: Scalar>(g: &Graph<T>, x: Var, cfg_depth: usize) -> Result<(usize, usize), NetError> {
    let (_, _, h, w) = g.value(x).dims4("network input")?;
    let f = 1usize << cfg_depth;
    if h % f != 0 || w % f != 0 {
        return Err(NetError::IncompatibleSize {
            height: h,
            width: w,
            depth: cfg_depth,
        });
    }
    Ok((h, w))
}

/// Input gain on the global residual path. Keeps `atanh` finite at ±1
/// (`atanh(0.995) ≈ 3`).
pub const RESIDUAL_GAIN: f64 = 0.995;

/// Encoder–decoder with skip connections and a `tanh` output. Used for both
/// generators and for the pretext reconstruction network. With a global
/// residual the output is `tanh(head + atanh(x))`.
#[derive(Debug, Clone)]
pub struct UNet {
    depth: usize,
    norm: NormKind,
    residual: bool,
    stem: ConvLayer,
    downs: Vec<ConvLayer>,
    bottleneck: ConvLayer,
    /// Decoder stages, deepest first.
    ups: Vec<ConvLayer>,
    head: ConvLayer,
}

impl UNet {
    pub fn new(cfg: &NetworkConfig, name: &str, store: &mut ParamStore<f32>, rng: &mut impl rand::Rng) -> Self {
        let c = |l| cfg.channels(l);
        let stem = ConvLayer::new(store, &format!("{name}.stem"), 1, c(0), 3, 1, 1, rng);
        let downs = (1..=cfg.depth)
            .map(|l| ConvLayer::new(store, &format!("{name}.down{l}"), c(l - 1), c(l), 3, 2, 1, rng))
            .collect();
        let bottleneck = ConvLayer::new(store, &format!("{name}.bottleneck"), c(cfg.depth), c(cfg.depth), 3, 1, 1, rng);
        let mut ups = Vec::with_capacity(cfg.depth);
        let mut cur = c(cfg.depth);
        for l in (1..=cfg.depth).rev() {
            ups.push(ConvLayer::new(store, &format!("{name}.up{l}"), cur + c(l - 1), c(l - 1), 3, 1, 1, rng));
            cur = c(l - 1);
        }
        let head = ConvLayer::new(store, &format!("{name}.head"), c(0), 1, 3, 1, 1, rng);
        Self {
            depth: cfg.depth,
            norm: cfg.norm_kind,
            residual: cfg.global_residual,
            stem,
            downs,
            bottleneck,
            ups,
            head,
        }
    }
}

impl Module for UNet {
    fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var, NetError> {
        input_dims(g, x, self.depth)?;
        let mut cur = self.stem.block(g, p, x, self.norm)?;
        let mut skips = vec![cur];
        for d in &self.downs {
            cur = d.block(g, p, cur, self.norm)?;
            skips.push(cur);
        }
        cur = self.bottleneck.block(g, p, cur, self.norm)?;
        skips.pop();
        for up in &self.ups {
            let skip = skips.pop().expect("one skip per level");
            let u = g.upsample2x(cur)?;
            let cat = g.concat_channels(&[u, skip])?;
            cur = up.block(g, p, cat, self.norm)?;
        }
        let mut out = self.head.forward(g, p, cur)?;
        if self.residual {
            let shrunk = g.scale(x, RESIDUAL_GAIN);
            let base = g.atanh(shrunk);
            out = g.add(out, base)?;
        }
        Ok(g.tanh(out))
    }
}

/// Strided convolutional classifier producing a map of raw real/fake scores,
/// one per `2^depth` patch.
#[derive(Debug, Clone)]
pub struct PatchDiscriminator {
    depth: usize,
    norm: NormKind,
    layers: Vec<ConvLayer>,
    head: ConvLayer,
}

impl PatchDiscriminator {
    pub fn new(cfg: &NetworkConfig, name: &str, store: &mut ParamStore<f32>, rng: &mut impl rand::Rng) -> Self {
        let mut layers = Vec::with_capacity(cfg.depth);
        let mut cin = 1;
        for l in 0..cfg.depth {
            let cout = cfg.channels(l);
            layers.push(ConvLayer::new(store, &format!("{name}.conv{l}"), cin, cout, 4, 2, 1, rng));
            cin = cout;
        }
        let head = ConvLayer::new(store, &format!("{name}.head"), cin, 1, 3, 1, 1, rng);
        Self {
            depth: cfg.depth,
            norm: cfg.norm_kind,
            layers,
            head,
        }
    }
}

impl Module for PatchDiscriminator {
    fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var, NetError> {
        input_dims(g, x, self.depth)?;
        let mut cur = x;
        for (l, layer) in self.layers.iter().enumerate() {
            // no normalisation on the first layer, as usual for patch critics
            let norm = if l == 0 { NormKind::None } else { self.norm };
            cur = layer.block(g, p, cur, norm)?;
        }
        self.head.forward(g, p, cur)
    }
}

/// Convolutional trunk, global average pool and a linear head. With
/// `normalize` the output rows are L2-normalised embeddings.
#[derive(Debug, Clone)]
pub struct Encoder {
    depth: usize,
    normalize: bool,
    stem: ConvLayer,
    downs: Vec<ConvLayer>,
    head: LinearLayer,
    feature_dim: usize,
}

impl Encoder {
    pub fn new(
        cfg: &NetworkConfig,
        name: &str,
        in_channels: usize,
        out_dim: usize,
        normalize: bool,
        store: &mut ParamStore<f32>,
        rng: &mut impl rand::Rng,
    ) -> Self {
        let stem = ConvLayer::new(store, &format!("{name}.stem"), in_channels, cfg.channels(0), 3, 1, 1, rng);
        let downs = (1..=cfg.depth)
            .map(|l| ConvLayer::new(store, &format!("{name}.down{l}"), cfg.channels(l - 1), cfg.channels(l), 3, 2, 1, rng))
            .collect();
        let feature_dim = cfg.channels(cfg.depth);
        let head = LinearLayer::new(store, &format!("{name}.head"), feature_dim, out_dim, rng);
        Self {
            depth: cfg.depth,
            normalize,
            stem,
            downs,
            head,
            feature_dim,
        }
    }

    /// Width of the pooled trunk features.
    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    /// Pooled trunk features `[N, feature_dim]`, before the head.
    pub fn features<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var, NetError> {
        if !g.value(x).all_finite() {
            return Err(NetError::NonFiniteInput("encoder"));
        }
        input_dims(g, x, self.depth)?;
        // no normalisation: per-plane statistics carry the slice identity
        let mut cur = self.stem.block(g, p, x, NormKind::None)?;
        for d in &self.downs {
            cur = d.block(g, p, cur, NormKind::None)?;
        }
        Ok(g.global_avg_pool(cur)?)
    }
}

impl Module for Encoder {
    fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var, NetError> {
        let f = self.features(g, p, x)?;
        let out = self.head.forward(g, p, f)?;
        if self.normalize {
            Ok(g.l2_normalize_rows(out)?)
        } else {
            Ok(out)
        }
    }
}
