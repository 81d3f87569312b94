//! Autodiff versus finite-difference gradient verification.

use rand::seq::index::sample;

use crate::autodiff::{Bound, Graph, Var};
use crate::params::ParamStore;
use crate::rng::rng_for;
use crate::tensor::Scalar;

use super::NetError;

/// A scalar objective over one trainable parameter store. Everything else the
/// objective needs (inputs, frozen networks) is owned by the implementor.
pub trait Objective {
    fn loss<T: Scalar>(&self, g: &mut Graph<T>, params: &Bound) -> Result<Var, NetError>;
}

/// Precision of the autodiff gradient under test. The finite-difference
/// reference is always evaluated in `f64`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Precision {
    Single,
    Double,
}

#[derive(Debug, Clone, Copy)]
pub struct GradcheckConfig {
    /// Step of the fourth-order central stencil.
    pub epsilon: f64,
    pub samples: usize,
    pub tolerance: f64,
    pub precision: Precision,
    pub seed: u64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            epsilon: 1e-3,
            samples: 32,
            tolerance: 1e-5,
            precision: Precision::Double,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GradcheckReport {
    pub max_relative_error: f64,
    pub checked: usize,
    pub passed: bool,
    /// `(flat index, autodiff, finite difference)` of the worst sample.
    pub worst: (usize, f64, f64),
}

fn eval_loss<O: Objective>(obj: &O, params: &ParamStore<f64>) -> Result<f64, NetError> {
    let mut g = Graph::<f64>::new();
    let p = g.bind(params, true);
    let l = obj.loss(&mut g, &p)?;
    let v = g.scalar(l);
    if !v.is_finite() {
        return Err(NetError::NonFiniteLoss(v));
    }
    Ok(v)
}

fn autodiff_grad<T: Scalar, O: Objective>(obj: &O, params: &ParamStore<f64>) -> Result<Vec<f64>, NetError> {
    let store: ParamStore<T> = params.cast();
    let mut g = Graph::<T>::new();
    let p = g.bind(&store, true);
    let l = obj.loss(&mut g, &p)?;
    let v = g.scalar(l);
    if !v.is_finite() {
        return Err(NetError::NonFiniteLoss(v));
    }
    let mut grads = g.backward(l)?;
    Ok(grads
        .for_params(&p, &store)
        .iter()
        .flat_map(|t| t.to_f64_vec())
        .collect())
}

/// Compares the autodiff gradient against a fourth-order central difference
/// `[8(f(x+h) − f(x−h)) − (f(x+2h) − f(x−2h))] / 12h` on `cfg.samples`
/// randomly chosen scalars. The relative error of one scalar is
/// `|g_ad − g_fd| / max(|g_ad|, |g_fd|, 1e-8)`.
pub fn gradcheck<O: Objective>(
    obj: &O,
    params: &ParamStore<f64>,
    cfg: &GradcheckConfig,
) -> Result<GradcheckReport, NetError> {
    let total = params.num_scalars();
    let ad = match cfg.precision {
        Precision::Single => autodiff_grad::<f32, O>(obj, params)?,
        Precision::Double => autodiff_grad::<f64, O>(obj, params)?,
    };
    let mut rng = rng_for(cfg.seed, &[0x6772_6164]);
    let picks = sample(&mut rng, total, cfg.samples.min(total)).into_vec();
    let h = cfg.epsilon;
    let mut work = params.clone();
    let mut worst = (0, 0.0, 0.0);
    let mut max_rel: f64 = 0.0;
    for &k in &picks {
        let x0 = *work.scalar_mut(k).expect("index in range");
        let mut at = |delta: f64| -> Result<f64, NetError> {
            *work.scalar_mut(k).expect("index in range") = x0 + delta;
            eval_loss(obj, &work)
        };
        let (p1, m1, p2, m2) = (at(h)?, at(-h)?, at(2.0 * h)?, at(-2.0 * h)?);
        *work.scalar_mut(k).expect("index in range") = x0;
        let fd = (8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * h);
        let rel = (ad[k] - fd).abs() / ad[k].abs().max(fd.abs()).max(1e-8);
        if rel >= max_rel {
            max_rel = rel;
            worst = (k, ad[k], fd);
        }
    }
    Ok(GradcheckReport {
        max_relative_error: max_rel,
        checked: picks.len(),
        passed: max_rel < cfg.tolerance,
        worst,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    struct SquaredNorm(crate::params::ParamId);

    impl Objective for SquaredNorm {
        fn loss<T: Scalar>(&self, g: &mut Graph<T>, params: &Bound) -> Result<Var, NetError> {
            let p = params.var(self.0);
            let sq = g.mul(p, p)?;
            let m = g.mean(sq);
            let n = g.value(p).numel() as f64;
            Ok(g.scale(m, n))
        }
    }

    #[test]
    fn quadratic_gradient_is_exact() {
        let mut store = ParamStore::<f64>::new();
        let vals: Vec<f64> = (0..40).map(|i| (i as f64 - 19.5) / 7.0).collect();
        let id = store.add("p", Tensor::from_f64(&[40], &vals).unwrap());
        let report = gradcheck(&SquaredNorm(id), &store, &GradcheckConfig::default()).unwrap();
        assert_eq!(report.checked, 32);
        assert!(report.max_relative_error < 1e-6, "{report:?}");
    }
}
