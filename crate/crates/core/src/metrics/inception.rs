//! Inception score over class posteriors.

use super::MetricsError;

/// Row sums must be within this of one.
pub const ROW_SUM_TOL: f64 = 1e-5;
pub const DEFAULT_SPLITS: usize = 4;

/// `KL(p ‖ q)` with `0·ln 0 = 0`.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(&pi, _)| pi > 0.0)
        .map(|(&pi, &qi)| pi * (pi.ln() - qi.ln()))
        .sum()
}

/// Inception score of an `[n, k]` row-stochastic matrix. The rows are cut
/// into `splits` contiguous chunks; each chunk scores
/// `exp(mean_i KL(p_i ‖ p̄))` against its own marginal. Returns the mean and
/// population standard deviation over chunks.
pub fn inception_score(probs: &[f64], n: usize, k: usize, splits: usize) -> Result<(f64, f64), MetricsError> {
    if k == 0 || probs.len() != n * k {
        return Err(MetricsError::Invalid(format!("expected {n}x{k} probabilities, got {} values", probs.len())));
    }
    if splits == 0 || n < splits {
        return Err(MetricsError::TooFew {
            what: "rows for the requested splits",
            need: splits.max(1),
            got: n,
        });
    }
    for (i, row) in probs.chunks(k).enumerate() {
        let sum: f64 = row.iter().sum();
        if row.iter().any(|&p| !(p >= 0.0 && p.is_finite())) || (sum - 1.0).abs() > ROW_SUM_TOL {
            return Err(MetricsError::Invalid(format!("row {i} is not a probability distribution (sum {sum})")));
        }
    }
    let scores: Vec<f64> = (0..splits)
        .map(|s| {
            let rows = &probs[s * n / splits * k..(s + 1) * n / splits * k];
            let m = rows.len() / k;
            let mut marginal = vec![0.0; k];
            for row in rows.chunks(k) {
                for (acc, &p) in marginal.iter_mut().zip(row) {
                    *acc += p / m as f64;
                }
            }
            let mean_kl = rows.chunks(k).map(|row| kl_divergence(row, &marginal)).sum::<f64>() / m as f64;
            mean_kl.max(0.0).exp()
        })
        .collect();
    let mean = scores.iter().sum::<f64>() / splits as f64;
    let var = scores.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / splits as f64;
    Ok((mean, var.sqrt()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn equal_rows_score_one() {
        let row = [0.1, 0.6, 0.3];
        let probs: Vec<f64> = row.iter().cycle().take(3 * 12).copied().collect();
        let (m, s) = inception_score(&probs, 12, 3, 4).unwrap();
        assert!((m - 1.0).abs() < 1e-12 && s.abs() < 1e-12);
    }

    #[test]
    fn balanced_one_hots_score_k() {
        let k = 5;
        let mut probs = vec![0.0; k * k];
        for i in 0..k {
            probs[i * k + (i * 2) % k] = 1.0;
        }
        let (m, _) = inception_score(&probs, k, k, 1).unwrap();
        assert!((m - k as f64).abs() < 1e-9);
    }

    #[test]
    fn invalid_rows_are_rejected() {
        assert!(inception_score(&[0.5, 0.4], 1, 2, 1).is_err());
        assert!(inception_score(&[1.5, -0.5], 1, 2, 1).is_err());
        assert!(inception_score(&[1.0, 0.0], 1, 2, 2).is_err());
    }
}
