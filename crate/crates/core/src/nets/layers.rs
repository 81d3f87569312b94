use crate::autodiff::{Bound, Graph, Var};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{Scalar, Tensor};

use super::{uniform_tensor, NetError, NormKind};

/// Square-kernel convolution with bias.
#[derive(Debug, Clone)]
pub struct ConvLayer {
    weight: ParamId,
    bias: ParamId,
    stride: usize,
    pad: usize,
}

impl ConvLayer {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore<f32>,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        rng: &mut impl rand::Rng,
    ) -> Self {
        let fan_in = (in_channels * kernel * kernel) as f64;
        let bound = (3.0 / fan_in).sqrt();
        let weight = store.add(
            format!("{name}.weight"),
            uniform_tensor(&[out_channels, in_channels, kernel, kernel], bound, rng),
        );
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[out_channels]));
        Self {
            weight,
            bias,
            stride,
            pad,
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var, NetError> {
        Ok(g.conv2d(x, p.var(self.weight), Some(p.var(self.bias)), self.stride, self.pad)?)
    }

    /// Convolution, optional instance norm, then SiLU.
    pub fn block<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, x: Var, norm: NormKind) -> Result<Var, NetError> {
        let mut y = self.forward(g, p, x)?;
        if norm == NormKind::Instance {
            y = g.instance_norm(y, 1e-5)?;
        }
        Ok(g.silu(y))
    }
}

#[derive(Debug, Clone)]
pub struct LinearLayer {
    weight: ParamId,
    bias: ParamId,
}

impl LinearLayer {
    pub fn new(store: &mut ParamStore<f32>, name: &str, in_dim: usize, out_dim: usize, rng: &mut impl rand::Rng) -> Self {
        let bound = (3.0 / in_dim as f64).sqrt();
        let weight = store.add(format!("{name}.weight"), uniform_tensor(&[out_dim, in_dim], bound, rng));
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[out_dim]));
        Self { weight, bias }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var, NetError> {
        Ok(g.linear(x, p.var(self.weight), Some(p.var(self.bias)))?)
    }
}
