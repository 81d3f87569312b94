//! The training objectives: temperature-scaled contrastive slice matching,
//! pretext reconstruction, cycle consistency, least-squares adversarial terms
//! and their weighted total.
//!
//! The `*_term` functions build the loss inside a [`Graph`] so training can
//! differentiate through it; the plain functions evaluate the same graph ops on
//! constant tensors.

use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{Graph, Var, COSINE_EPS};
use crate::tensor::{Scalar, Tensor, TensorError};

pub const DEFAULT_TAU: f64 = 0.1;

#[derive(Debug, Error)]
pub enum LossError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("temperature must be positive and finite, got {0}")]
    Temperature(f64),
    #[error("loss weight {name} must be finite and >= 0, got {value}")]
    Weight { name: &'static str, value: f64 },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

/// `λ₁`, `λ₂`, `λ₃` of the generator objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda1: 0.5,
            lambda2: 0.2,
            lambda3: 0.3,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<(), LossError> {
        for (name, value) in [("lambda1", self.lambda1), ("lambda2", self.lambda2), ("lambda3", self.lambda3)] {
            if !(value.is_finite() && value >= 0.0) {
                return Err(LossError::Weight { name, value });
            }
        }
        Ok(())
    }
}

fn check_tau(tau: f64) -> Result<(), LossError> {
    if tau > 0.0 && tau.is_finite() {
        Ok(())
    } else {
        Err(LossError::Temperature(tau))
    }
}

/// `a·b / (‖a‖‖b‖ + 1e-8)`.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64, LossError> {
    if a.len() != b.len() {
        return Err(TensorError::ShapeMismatch {
            op: "cosine_similarity",
            lhs: vec![a.len()],
            rhs: vec![b.len()],
        }
        .into());
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    Ok(dot / (na * nb + COSINE_EPS))
}

/// Contrastive term over `[N, d]` embeddings where row `i` of `hf` is the
/// positive for row `i` of `lf`. With `symmetric`, the HF→LF direction is
/// averaged in.
pub fn sgp_term<T: Scalar>(g: &mut Graph<T>, lf: Var, hf: Var, tau: f64, symmetric: bool) -> Result<Var, LossError> {
    check_tau(tau)?;
    let s = g.cosine_matrix(lf, hf)?;
    let forward = g.diag_cross_entropy(s, tau)?;
    if !symmetric {
        return Ok(forward);
    }
    let st = g.cosine_matrix(hf, lf)?;
    let backward = g.diag_cross_entropy(st, tau)?;
    Ok(g.weighted_sum(&[(forward, 0.5), (backward, 0.5)])?)
}

fn eval<T: Scalar>(inputs: &[&Tensor<T>], build: impl FnOnce(&mut Graph<T>, &[Var]) -> Result<Var, LossError>) -> Result<f64, LossError> {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.constant((*t).clone())).collect();
    let out = build(&mut g, &vars)?;
    Ok(g.scalar(out))
}

/// `−(1/N) Σᵢ log softmax_j(sim(lfᵢ, hfⱼ)/τ)ᵢ`.
pub fn sgp_contrastive_loss<T: Scalar>(emb_lf: &Tensor<T>, emb_hf: &Tensor<T>, tau: f64) -> Result<f64, LossError> {
    eval(&[emb_lf, emb_hf], |g, v| sgp_term(g, v[0], v[1], tau, false))
}

pub fn sgp_contrastive_loss_symmetric<T: Scalar>(emb_lf: &Tensor<T>, emb_hf: &Tensor<T>, tau: f64) -> Result<f64, LossError> {
    eval(&[emb_lf, emb_hf], |g, v| sgp_term(g, v[0], v[1], tau, true))
}

/// Mean squared reconstruction error.
pub fn lsc_loss<T: Scalar>(target: &Tensor<T>, reconstruction: &Tensor<T>) -> Result<f64, LossError> {
    eval(&[target, reconstruction], |g, v| Ok(g.mse(v[0], v[1])?))
}

/// Mean absolute error.
pub fn cycle_loss<T: Scalar>(x: &Tensor<T>, x_reconstructed: &Tensor<T>) -> Result<f64, LossError> {
    eval(&[x, x_reconstructed], |g, v| Ok(g.mae(v[0], v[1])?))
}

/// Least-squares discriminator loss `½·mean((d_real−1)²) + ½·mean(d_fake²)`.
pub fn adversarial_d_term<T: Scalar>(g: &mut Graph<T>, d_real: Var, d_fake: Var) -> Var {
    let r = g.mse_to(d_real, 1.0);
    let f = g.mse_to(d_fake, 0.0);
    g.weighted_sum(&[(r, 0.5), (f, 0.5)]).expect("scalar terms")
}

/// Least-squares generator loss `mean((d_fake−1)²)`.
pub fn adversarial_g_term<T: Scalar>(g: &mut Graph<T>, d_fake: Var) -> Var {
    g.mse_to(d_fake, 1.0)
}

/// `(loss_d, loss_g)` for given score maps.
pub fn adversarial_losses<T: Scalar>(d_real: &Tensor<T>, d_fake: &Tensor<T>) -> Result<(f64, f64), LossError> {
    let ld = eval(&[d_real, d_fake], |g, v| Ok(adversarial_d_term(g, v[0], v[1])))?;
    let lg = eval(&[d_fake], |g, v| Ok(adversarial_g_term(g, v[0])))?;
    Ok((ld, lg))
}

/// `λ₁·L_syn + λ₂·L_cycle + λ₃·L_adv`.
pub fn total_loss(l_syn: f64, l_cycle: f64, l_adv_g: f64, w: &LossWeights) -> f64 {
    w.lambda1 * l_syn + w.lambda2 * l_cycle + w.lambda3 * l_adv_g
}

/// Per-iteration loss values. Terms that a stage does not compute are `None`
/// and show up as empty CSV cells.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub iteration: u64,
    pub sgp: Option<f64>,
    pub lsc: Option<f64>,
    pub syn: Option<f64>,
    pub cycle: Option<f64>,
    pub adv_g: Option<f64>,
    pub adv_d: Option<f64>,
    pub total: Option<f64>,
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
}

/// Column order of the training log.
pub const LOSS_CSV_COLUMNS: [&str; 11] = [
    "iteration", "sgp", "lsc", "syn", "cycle", "adv_g", "adv_d", "total", "lambda1", "lambda2", "lambda3",
];

impl LossReport {
    pub fn new(iteration: u64, weights: &LossWeights) -> Self {
        Self {
            iteration,
            sgp: None,
            lsc: None,
            syn: None,
            cycle: None,
            adv_g: None,
            adv_d: None,
            total: None,
            lambda1: weights.lambda1,
            lambda2: weights.lambda2,
            lambda3: weights.lambda3,
        }
    }

    pub fn values(&self) -> impl Iterator<Item = (&'static str, f64)> + '_ {
        [
            ("sgp", self.sgp),
            ("lsc", self.lsc),
            ("syn", self.syn),
            ("cycle", self.cycle),
            ("adv_g", self.adv_g),
            ("adv_d", self.adv_d),
            ("total", self.total),
        ]
        .into_iter()
        .filter_map(|(k, v)| v.map(|v| (k, v)))
    }

    pub fn all_finite(&self) -> bool {
        self.values().all(|(_, v)| v.is_finite())
    }
}

/// Writes reports as CSV with a header row.
pub fn write_loss_csv<W: Write>(out: W, reports: &[LossReport]) -> Result<(), LossError> {
    let mut w = csv::Writer::from_writer(out);
    for r in reports {
        w.serialize(r)?;
    }
    if reports.is_empty() {
        w.write_record(LOSS_CSV_COLUMNS)?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

pub fn loss_csv_string(reports: &[LossReport]) -> Result<String, LossError> {
    let mut buf = Vec::new();
    write_loss_csv(&mut buf, reports)?;
    Ok(String::from_utf8(buf).expect("csv is utf-8"))
}

pub fn read_loss_csv(text: &str) -> Result<Vec<LossReport>, LossError> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    Ok(r.deserialize().collect::<Result<_, _>>()?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, data).unwrap()
    }

    #[test]
    fn cosine_cases() {
        let v = [0.3, -1.2, 2.0];
        let neg: Vec<f64> = v.iter().map(|x| -x).collect();
        assert!((cosine_similarity(&v, &v).unwrap() - 1.0).abs() < 1e-6);
        assert!((cosine_similarity(&v, &neg).unwrap() + 1.0).abs() < 1e-6);
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert!(cosine_similarity(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn identical_embeddings_give_ln_n() {
        for n in [2usize, 4, 8] {
            let row = [0.2, -0.5, 0.9];
            let data: Vec<f64> = (0..n).flat_map(|_| row).collect();
            let e = t(&[n, 3], &data);
            let l = sgp_contrastive_loss(&e, &e, 0.1).unwrap();
            assert!((l - (n as f64).ln()).abs() < 1e-6, "n={n}: {l}");
        }
    }

    #[test]
    fn single_pair_gives_zero() {
        let a = t(&[1, 2], &[0.3, 0.4]);
        let b = t(&[1, 2], &[-1.0, 2.0]);
        assert_eq!(sgp_contrastive_loss(&a, &b, 0.5).unwrap(), 0.0);
    }

    #[test]
    fn orthonormal_pair_value() {
        let e = t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]);
        let l = sgp_contrastive_loss(&e, &e, 1.0).unwrap();
        let want = -(1f64.exp() / (1f64.exp() + 1.0)).ln();
        assert!((l - want).abs() < 1e-6);
    }

    #[test]
    fn temperature_must_be_positive() {
        let e = t(&[1, 2], &[1.0, 0.0]);
        assert!(matches!(sgp_contrastive_loss(&e, &e, 0.0), Err(LossError::Temperature(_))));
        assert!(matches!(sgp_contrastive_loss(&e, &e, -1.0), Err(LossError::Temperature(_))));
    }

    #[test]
    fn symmetric_variant_averages_directions() {
        let a = t(&[3, 2], &[1.0, 0.2, -0.3, 1.0, 0.5, 0.5]);
        let b = t(&[3, 2], &[0.9, 0.1, 0.2, 1.0, -0.5, 0.7]);
        let f = sgp_contrastive_loss(&a, &b, 0.3).unwrap();
        let r = sgp_contrastive_loss(&b, &a, 0.3).unwrap();
        let s = sgp_contrastive_loss_symmetric(&a, &b, 0.3).unwrap();
        assert!((s - 0.5 * (f + r)).abs() < 1e-12);
    }

    #[test]
    fn reconstruction_cases() {
        let a = t(&[2, 2], &[0.1, 0.2, 0.3, 0.4]);
        assert_eq!(lsc_loss(&a, &a).unwrap(), 0.0);
        assert_eq!(lsc_loss(&t(&[3], &[1.0; 3]), &t(&[3], &[0.0; 3])).unwrap(), 1.0);
        assert!(lsc_loss(&a, &t(&[4], &[0.0; 4])).is_err());
        assert_eq!(cycle_loss(&a, &a).unwrap(), 0.0);
        let shifted = t(&[2, 2], &[0.6, 0.7, 0.8, 0.9]);
        assert!((cycle_loss(&a, &shifted).unwrap() - 0.5).abs() < 1e-12);
        assert_eq!(cycle_loss(&a, &shifted).unwrap(), cycle_loss(&shifted, &a).unwrap());
    }

    #[test]
    fn adversarial_cases() {
        let ones = t(&[1, 1, 2, 2], &[1.0; 4]);
        let zeros = t(&[1, 1, 2, 2], &[0.0; 4]);
        assert_eq!(adversarial_losses(&ones, &zeros).unwrap(), (0.0, 1.0));
        let half = t(&[1, 1, 2, 2], &[0.5; 4]);
        assert_eq!(adversarial_losses(&half, &half).unwrap(), (0.25, 0.25));
    }

    #[test]
    fn total_is_weighted_sum() {
        let w = LossWeights::default();
        assert_eq!(total_loss(0.0, 0.0, 0.0, &w), 0.0);
        assert!((total_loss(1.0, 1.0, 1.0, &w) - 1.0).abs() < 1e-12);
        assert!((total_loss(2.0, 5.0, 10.0, &w) - 5.0).abs() < 1e-12);
        assert!(LossWeights { lambda1: -0.1, ..w }.validate().is_err());
    }

    #[test]
    fn csv_round_trip_keeps_absent_terms_empty() {
        let w = LossWeights::default();
        let mut a = LossReport::new(0, &w);
        a.cycle = Some(0.25);
        a.total = Some(1.5);
        let mut b = LossReport::new(1, &w);
        b.syn = Some(0.125);
        let text = loss_csv_string(&[a.clone(), b.clone()]).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), LOSS_CSV_COLUMNS.join(","));
        assert_eq!(lines.next().unwrap(), "0,,,,0.25,,,1.5,0.5,0.2,0.3");
        assert_eq!(read_loss_csv(&text).unwrap(), vec![a, b]);
        assert_eq!(loss_csv_string(&[]).unwrap().trim(), LOSS_CSV_COLUMNS.join(","));
    }
}
