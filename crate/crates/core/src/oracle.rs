//! Brute-force reference implementations and gradcheck objectives.
//!
//! The scalar functions here use plain loops over `f64` slices and share no
//! code with the graph or tensor routes they are compared against.

use std::sync::Arc;

use crate::autodiff::{Bound, Graph, Var};
use crate::corruption::BatchCorruption;
use crate::losses::{sgp_term, LossWeights};
use crate::nets::{Encoder, Module, NetError, Objective, PatchDiscriminator, UNet};
use crate::params::ParamStore;
use crate::tensor::{Scalar, Tensor};
use crate::training::{GeneratorGraph, GeneratorOverride};

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let mut dot = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for k in 0..a.len() {
        dot += a[k] * b[k];
        na += a[k] * a[k];
        nb += b[k] * b[k];
    }
    dot / (na.sqrt() * nb.sqrt() + 1e-8)
}

/// `−(1/N) Σ_i ln( exp(cos(a_i, b_i)/τ) / Σ_j exp(cos(a_i, b_j)/τ) )` over
/// row-major `[n, d]` embeddings.
pub fn sgp_loss(lf: &[f64], hf: &[f64], n: usize, d: usize, tau: f64) -> f64 {
    let mut total = 0.0;
    for i in 0..n {
        let a = &lf[i * d..(i + 1) * d];
        let mut denom = 0.0;
        for j in 0..n {
            denom += (cosine(a, &hf[j * d..(j + 1) * d]) / tau).exp();
        }
        let pos = (cosine(a, &hf[i * d..(i + 1) * d]) / tau).exp();
        total -= (pos / denom).ln();
    }
    total / n as f64
}

pub fn mean_squared(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for k in 0..a.len() {
        s += (a[k] - b[k]) * (a[k] - b[k]);
    }
    s / a.len() as f64
}

pub fn mean_abs(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for k in 0..a.len() {
        s += (a[k] - b[k]).abs();
    }
    s / a.len() as f64
}

/// Least-squares adversarial terms `(L_D, L_G)` for raw patch scores.
pub fn adversarial(real: &[f64], fake: &[f64]) -> (f64, f64) {
    let (mut r, mut f, mut g) = (0.0, 0.0, 0.0);
    for &v in real {
        r += (v - 1.0) * (v - 1.0);
    }
    for &v in fake {
        f += v * v;
        g += (v - 1.0) * (v - 1.0);
    }
    (
        0.5 * r / real.len() as f64 + 0.5 * f / fake.len() as f64,
        g / fake.len() as f64,
    )
}

/// Single-split inception score with the marginal and KL as explicit loops.
pub fn inception_score(probs: &[f64], n: usize, k: usize) -> f64 {
    let mut marginal = vec![0.0; k];
    for i in 0..n {
        for j in 0..k {
            marginal[j] += probs[i * k + j];
        }
    }
    for m in marginal.iter_mut() {
        *m /= n as f64;
    }
    let mut kl_sum = 0.0;
    for i in 0..n {
        for j in 0..k {
            let p = probs[i * k + j];
            if p > 0.0 {
                kl_sum += p * (p / marginal[j]).ln();
            }
        }
    }
    (kl_sum / n as f64).exp()
}

/// Contrastive loss through the encoder for a fixed pair of batches.
pub struct SgpObjective {
    pub encoder: Encoder,
    pub lf: Tensor<f64>,
    pub hf: Tensor<f64>,
    pub tau: f64,
}

impl Objective for SgpObjective {
    fn loss<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound) -> Result<Var, NetError> {
        let a = g.constant(self.lf.cast());
        let b = g.constant(self.hf.cast());
        let ea = self.encoder.forward(g, p, a)?;
        let eb = self.encoder.forward(g, p, b)?;
        sgp_term(g, ea, eb, self.tau, false).map_err(|e| NetError::Config(e.to_string()))
    }
}

/// Pretext reconstruction loss through `E_T` for a fixed corruption map.
pub struct LscObjective {
    pub net: UNet,
    pub x: Tensor<f64>,
    pub map: Arc<[u32]>,
    pub fill: f64,
}

impl Objective for LscObjective {
    fn loss<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound) -> Result<Var, NetError> {
        let x = g.constant(self.x.cast());
        let shape = self.x.shape().to_vec();
        let c = g.gather(x, self.map.clone(), self.fill, &shape)?;
        let r = self.net.forward(g, p, c)?;
        Ok(g.mse(x, r)?)
    }
}

/// The full generator objective, differentiated with respect to the LF→HF
/// generator; every other network is a frozen constant.
pub struct GeneratorObjective {
    pub g_lf2hf: UNet,
    pub g_hf2lf: (UNet, ParamStore<f64>),
    pub d_hf: (PatchDiscriminator, ParamStore<f64>),
    pub d_lf: (PatchDiscriminator, ParamStore<f64>),
    pub pretext: Option<(UNet, ParamStore<f64>, BatchCorruption)>,
    pub weights: LossWeights,
    pub x: Tensor<f64>,
    pub y: Tensor<f64>,
}

impl Objective for GeneratorObjective {
    fn loss<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound) -> Result<Var, NetError> {
        let pf = g.bind(&self.g_hf2lf.1.cast(), false);
        let pdh = g.bind(&self.d_hf.1.cast(), false);
        let pdl = g.bind(&self.d_lf.1.cast(), false);
        let pe = self.pretext.as_ref().map(|(_, s, _)| g.bind(&s.cast(), false));
        let graph = GeneratorGraph {
            g_lf2hf: (&self.g_lf2hf, p),
            g_hf2lf: (&self.g_hf2lf.0, &pf),
            d_hf: (&self.d_hf.0, &pdh),
            d_lf: (&self.d_lf.0, &pdl),
            pretext: match (&self.pretext, &pe) {
                (Some((et, _, plan)), Some(pe)) => Some((et, pe, plan)),
                _ => None,
            },
            weights: self.weights,
            generator_override: GeneratorOverride::None,
        };
        let x = g.constant(self.x.cast());
        let y = g.constant(self.y.cast());
        let terms = graph.build(g, x, y).map_err(|e| NetError::Config(e.to_string()))?;
        Ok(terms.total)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn analytic_cases() {
        assert!((cosine(&[1.0, 0.0], &[0.0, 2.0])).abs() < 1e-15);
        let e = [1.0, 0.0, 1.0, 0.0];
        assert!((sgp_loss(&e, &e, 2, 2, 0.1) - 2f64.ln()).abs() < 1e-12);
        assert_eq!(adversarial(&[1.0, 1.0], &[0.0]), (0.0, 1.0));
        assert!((inception_score(&[1.0, 0.0, 0.0, 1.0], 2, 2) - 2.0).abs() < 1e-12);
    }
}
