//! Fréchet distance between Gaussian fits of two feature sets.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use super::{FeatureSet, MetricsError};

/// Tolerance for the symmetry precondition of [`matrix_sqrt_psd`].
pub const SYMMETRY_TOL: f64 = 1e-6;

/// Principal square root of a symmetric positive semi-definite matrix via
/// eigendecomposition. Negative eigenvalues (round-off) are clamped to zero.
pub fn matrix_sqrt_psd(m: &DMatrix<f64>) -> Result<DMatrix<f64>, MetricsError> {
    let n = m.nrows();
    if m.ncols() != n {
        return Err(MetricsError::Invalid(format!("matrix_sqrt_psd needs a square matrix, got {}x{}", n, m.ncols())));
    }
    if m.iter().any(|v| !v.is_finite()) {
        return Err(MetricsError::NonFinite("matrix_sqrt_psd input"));
    }
    let scale = m.amax().max(1.0);
    let asym = (m - m.transpose()).amax();
    if asym > SYMMETRY_TOL * scale {
        return Err(MetricsError::Asymmetric(asym));
    }
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let roots = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    let v = &eig.eigenvectors;
    Ok(v * DMatrix::from_diagonal(&roots) * v.transpose())
}

/// Column means and the unbiased (1/(N−1)) covariance of `[N, d]` rows.
pub fn mean_and_covariance(fs: &FeatureSet) -> (DVector<f64>, DMatrix<f64>) {
    let (n, d) = (fs.n, fs.dim);
    let x = DMatrix::from_row_slice(n, d, &fs.features);
    let mu = DVector::from_iterator(d, (0..d).map(|j| x.column(j).sum() / n as f64));
    let mut centred = x;
    for mut row in centred.row_iter_mut() {
        row -= mu.transpose();
    }
    let cov = centred.transpose() * &centred / (n as f64 - 1.0);
    (mu, cov)
}

/// `‖μa−μb‖² + Tr(Σa + Σb − 2·(Σa^½ Σb Σa^½)^½)`. Values in `(−1e-6, 0)`
/// are clamped to zero.
pub fn fid(a: &FeatureSet, b: &FeatureSet) -> Result<f64, MetricsError> {
    if a.extractor_id != b.extractor_id {
        return Err(MetricsError::ExtractorMismatch {
            a: a.extractor_id.clone(),
            b: b.extractor_id.clone(),
        });
    }
    if a.dim != b.dim {
        return Err(MetricsError::Invalid(format!("feature widths differ: {} vs {}", a.dim, b.dim)));
    }
    for fs in [a, b] {
        if fs.n < 2 {
            return Err(MetricsError::TooFew {
                what: "feature rows for a covariance",
                need: 2,
                got: fs.n,
            });
        }
    }
    let (mu_a, cov_a) = mean_and_covariance(a);
    let (mu_b, cov_b) = mean_and_covariance(b);
    let sa = matrix_sqrt_psd(&cov_a)?;
    let inner = &sa * &cov_b * &sa;
    // round-off can leave the product slightly asymmetric
    let inner = (&inner + inner.transpose()) * 0.5;
    let cross = matrix_sqrt_psd(&inner)?.trace();
    let value = (mu_a - mu_b).norm_squared() + cov_a.trace() + cov_b.trace() - 2.0 * cross;
    if !value.is_finite() {
        return Err(MetricsError::NonFinite("fid"));
    }
    Ok(if value < 0.0 && value > -1e-6 { 0.0 } else { value })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fs(n: usize, d: usize, data: Vec<f64>) -> FeatureSet {
        FeatureSet::new(n, d, data, "x").unwrap()
    }

    #[test]
    fn diagonal_roots() {
        let r = matrix_sqrt_psd(&DMatrix::from_diagonal(&DVector::from_vec(vec![4.0, 9.0]))).unwrap();
        assert!((r[(0, 0)] - 2.0).abs() < 1e-12 && (r[(1, 1)] - 3.0).abs() < 1e-12);
        assert!(r[(0, 1)].abs() < 1e-12);
        let i = matrix_sqrt_psd(&DMatrix::identity(5, 5)).unwrap();
        assert!((i - DMatrix::identity(5, 5)).amax() < 1e-12);
    }

    #[test]
    fn asymmetric_input_is_rejected() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.0, 1.0]);
        assert!(matches!(matrix_sqrt_psd(&m), Err(MetricsError::Asymmetric(_))));
    }

    #[test]
    fn negative_round_off_is_clamped() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0 - 1e-13]);
        let r = matrix_sqrt_psd(&m).unwrap();
        assert!(r.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn shifted_copy_gives_squared_shift() {
        let base: Vec<f64> = (0..60).map(|k| ((k * 37) % 11) as f64 / 7.0).collect();
        let shifted: Vec<f64> = base.iter().enumerate().map(|(k, v)| v + if k % 3 == 0 { 2.0 } else { 0.0 }).collect();
        let v = fid(&fs(20, 3, base), &fs(20, 3, shifted)).unwrap();
        assert!((v - 4.0).abs() < 1e-9, "{v}");
    }

    #[test]
    fn mismatched_extractors_are_rejected() {
        let a = fs(3, 1, vec![0.0, 1.0, 2.0]);
        let b = FeatureSet::new(3, 1, vec![0.0, 1.0, 2.0], "y").unwrap();
        assert!(matches!(fid(&a, &b), Err(MetricsError::ExtractorMismatch { .. })));
        assert!(fid(&fs(1, 1, vec![0.0]), &a).is_err());
    }
}
