//! Multi-scale structural similarity.

use super::MetricsError;
use crate::data::{IntensityRange, Slice};

pub const WINDOW: usize = 11;
pub const SIGMA: f64 = 1.5;
pub const K1: f64 = 0.01;
pub const K2: f64 = 0.03;
/// Canonical five-scale exponents; fewer scales use a renormalised prefix.
pub const SCALE_WEIGHTS: [f64; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];
pub const DEFAULT_SCALES: usize = 3;

fn gaussian_window() -> [f64; WINDOW] {
    let c = (WINDOW / 2) as f64;
    let mut w = [0.0; WINDOW];
    for (i, v) in w.iter_mut().enumerate() {
        let x = i as f64 - c;
        *v = (-x * x / (2.0 * SIGMA * SIGMA)).exp();
    }
    let s: f64 = w.iter().sum();
    w.map(|v| v / s)
}

/// Separable "valid" Gaussian filter.
fn filter(x: &[f64], h: usize, w: usize, g: &[f64; WINDOW]) -> (Vec<f64>, usize, usize) {
    let (oh, ow) = (h + 1 - WINDOW, w + 1 - WINDOW);
    let mut rows = vec![0.0; h * ow];
    for r in 0..h {
        for c in 0..ow {
            rows[r * ow + c] = (0..WINDOW).map(|k| g[k] * x[r * w + c + k]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for r in 0..oh {
        for c in 0..ow {
            out[r * ow + c] = (0..WINDOW).map(|k| g[k] * rows[(r + k) * ow + c]).sum();
        }
    }
    (out, oh, ow)
}

/// Mean SSIM and mean contrast-structure term at one scale.
fn ssim_terms(a: &[f64], b: &[f64], h: usize, w: usize, c1: f64, c2: f64) -> (f64, f64) {
    let g = gaussian_window();
    let (mu_a, _, _) = filter(a, h, w, &g);
    let (mu_b, _, _) = filter(b, h, w, &g);
    let aa: Vec<f64> = a.iter().map(|v| v * v).collect();
    let bb: Vec<f64> = b.iter().map(|v| v * v).collect();
    let ab: Vec<f64> = a.iter().zip(b).map(|(x, y)| x * y).collect();
    let (e_aa, _, _) = filter(&aa, h, w, &g);
    let (e_bb, _, _) = filter(&bb, h, w, &g);
    let (e_ab, _, _) = filter(&ab, h, w, &g);
    let n = mu_a.len() as f64;
    let (mut ssim, mut cs) = (0.0, 0.0);
    for i in 0..mu_a.len() {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let va = e_aa[i] - ma * ma;
        let vb = e_bb[i] - mb * mb;
        let cov = e_ab[i] - ma * mb;
        let l = (2.0 * ma * mb + c1) / (ma * ma + mb * mb + c1);
        let s = (2.0 * cov + c2) / (va + vb + c2);
        ssim += l * s;
        cs += s;
    }
    (ssim / n, cs / n)
}

fn avg_pool2(x: &[f64], h: usize, w: usize) -> (Vec<f64>, usize, usize) {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![0.0; oh * ow];
    for r in 0..oh {
        for c in 0..ow {
            let i = 2 * r * w + 2 * c;
            out[r * ow + c] = 0.25 * (x[i] + x[i + 1] + x[i + w] + x[i + w + 1]);
        }
    }
    (out, oh, ow)
}

/// MS-SSIM of two equally sized images with the given dynamic range.
pub fn ms_ssim_pixels(
    a: &[f32],
    b: &[f32],
    height: usize,
    width: usize,
    dynamic_range: f64,
    scales: usize,
) -> Result<f64, MetricsError> {
    if a.len() != height * width || b.len() != height * width {
        return Err(MetricsError::Invalid(format!(
            "ms_ssim inputs have {} and {} pixels, expected {height}x{width}",
            a.len(),
            b.len()
        )));
    }
    if scales == 0 || scales > SCALE_WEIGHTS.len() {
        return Err(MetricsError::Invalid(format!("scales must be in 1..=5, got {scales}")));
    }
    let need = WINDOW << (scales - 1);
    if height.min(width) < need {
        return Err(MetricsError::TooSmall {
            height,
            width,
            scales,
            need,
        });
    }
    if !(dynamic_range > 0.0 && dynamic_range.is_finite()) {
        return Err(MetricsError::Invalid(format!("dynamic range must be positive, got {dynamic_range}")));
    }
    let c1 = (K1 * dynamic_range).powi(2);
    let c2 = (K2 * dynamic_range).powi(2);
    let wsum: f64 = SCALE_WEIGHTS[..scales].iter().sum();
    let mut x: Vec<f64> = a.iter().map(|&v| v as f64).collect();
    let mut y: Vec<f64> = b.iter().map(|&v| v as f64).collect();
    let (mut h, mut w) = (height, width);
    let mut value = 1.0;
    for s in 0..scales {
        let (ssim, cs) = ssim_terms(&x, &y, h, w, c1, c2);
        let term = if s + 1 == scales { ssim } else { cs };
        // negative terms would make the fractional power undefined
        value *= term.max(0.0).powf(SCALE_WEIGHTS[s] / wsum);
        if s + 1 < scales {
            (x, _, _) = avg_pool2(&x, h, w);
            (y, h, w) = avg_pool2(&y, h, w);
        }
    }
    Ok(value.clamp(0.0, 1.0))
}

/// MS-SSIM of two slices sharing a declared intensity range; the dynamic range
/// comes from that tag (1 for unit, 2 for signed).
pub fn ms_ssim(a: &Slice, b: &Slice, scales: usize) -> Result<f64, MetricsError> {
    if (a.height, a.width) != (b.height, b.width) {
        return Err(MetricsError::Invalid(format!(
            "slice dims differ: {}x{} vs {}x{}",
            a.height, a.width, b.height, b.width
        )));
    }
    if a.intensity_range != b.intensity_range {
        return Err(MetricsError::Invalid(format!(
            "intensity ranges differ: {:?} vs {:?}",
            a.intensity_range, b.intensity_range
        )));
    }
    let range = match a.intensity_range.bounds() {
        Some((lo, hi)) => (hi - lo) as f64,
        None => {
            return Err(MetricsError::Invalid(
                "ms_ssim needs a declared normalised intensity range".into(),
            ))
        }
    };
    ms_ssim_pixels(&a.pixels, &b.pixels, a.height, a.width, range, scales)
}

/// Dynamic range for a range tag, if declared.
pub fn dynamic_range(r: IntensityRange) -> Option<f64> {
    r.bounds().map(|(lo, hi)| (hi - lo) as f64)
}
