//! First-order optimizers over a [`ParamStore`].

use serde::{Deserialize, Serialize};

use crate::params::ParamStore;
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    SgdMomentum,
    AdaptiveMoments,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub momentum: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            kind: OptimizerKind::AdaptiveMoments,
            learning_rate: 2e-4,
            beta1: 0.5,
            beta2: 0.999,
            eps: 1e-8,
            momentum: 0.9,
        }
    }
}

pub struct Optimizer<T> {
    cfg: OptimizerConfig,
    first: Vec<Tensor<T>>,
    second: Vec<Tensor<T>>,
    step: u64,
}

impl<T: Scalar> Optimizer<T> {
    pub fn new(cfg: OptimizerConfig, params: &ParamStore<T>) -> Self {
        let zeros = || params.iter().map(|(_, _, t)| Tensor::zeros(t.shape())).collect();
        let second = match cfg.kind {
            OptimizerKind::AdaptiveMoments => zeros(),
            OptimizerKind::SgdMomentum => Vec::new(),
        };
        Self {
            cfg,
            first: zeros(),
            second,
            step: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update. `grads` is in the store's canonical order.
    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &[Tensor<T>]) {
        assert_eq!(grads.len(), params.len(), "one gradient per parameter");
        self.step += 1;
        let lr = T::of(self.cfg.learning_rate);
        match self.cfg.kind {
            OptimizerKind::SgdMomentum => {
                let mu = T::of(self.cfg.momentum);
                for (k, (g, p)) in grads.iter().zip(params.values_mut()).enumerate() {
                    let v = self.first[k].data_mut();
                    let p = p.data_mut();
                    for ((pv, vv), &gv) in p.iter_mut().zip(v.iter_mut()).zip(g.data()) {
                        *vv = mu * *vv + gv;
                        *pv = *pv - lr * *vv;
                    }
                }
            }
            OptimizerKind::AdaptiveMoments => {
                let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
                let c1 = T::of(1.0 - b1.powi(self.step as i32));
                let c2 = T::of(1.0 - b2.powi(self.step as i32));
                let (b1, b2, eps) = (T::of(b1), T::of(b2), T::of(self.cfg.eps));
                let one = T::one();
                for (k, (g, p)) in grads.iter().zip(params.values_mut()).enumerate() {
                    let m = self.first[k].data_mut();
                    let v = self.second[k].data_mut();
                    let p = p.data_mut();
                    for (((pv, mv), vv), &gv) in p.iter_mut().zip(m.iter_mut()).zip(v.iter_mut()).zip(g.data()) {
                        *mv = b1 * *mv + (one - b1) * gv;
                        *vv = b2 * *vv + (one - b2) * gv * gv;
                        let mhat = *mv / c1;
                        let vhat = *vv / c2;
                        *pv = *pv - lr * mhat / (vhat.sqrt() + eps);
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quadratic_descent(kind: OptimizerKind) -> f64 {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("p", Tensor::from_f64(&[2], &[3.0, -2.0]).unwrap());
        let cfg = OptimizerConfig {
            kind,
            learning_rate: 0.05,
            beta1: 0.9,
            ..Default::default()
        };
        let mut opt = Optimizer::new(cfg, &store);
        for _ in 0..500 {
            let g = store.get(id).data().iter().map(|&v| 2.0 * v).collect();
            let g = Tensor::from_vec(&[2], g).unwrap();
            opt.step(&mut store, &[g]);
        }
        store.get(id).data().iter().map(|v| v * v).sum()
    }

    #[test]
    fn both_optimizers_minimise_a_quadratic() {
        assert!(quadratic_descent(OptimizerKind::SgdMomentum) < 1e-6);
        assert!(quadratic_descent(OptimizerKind::AdaptiveMoments) < 1e-3);
    }
}
