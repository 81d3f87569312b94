//! Simulated low-field acquisition: blur, block-average downsample, bilinear
//! upsample, additive Gaussian noise, clamp.

use rand_distr::{Distribution, Normal};

use super::{DataError, FieldStrength, IntensityRange, PhantomConfig, Slice, Volume};
use crate::rng::{hash_str, rng_for};

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = ((3.0 * sigma).ceil() as usize).max(1);
    let mut k: Vec<f64> = (0..=2 * radius)
        .map(|i| {
            let d = i as f64 - radius as f64;
            (-d * d / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let total: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= total);
    k
}

/// Separable Gaussian blur with edge replication.
pub fn gaussian_blur(pixels: &[f32], height: usize, width: usize, sigma: f64) -> Vec<f32> {
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as isize;
    let clampi = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    let mut tmp = vec![0.0f64; height * width];
    for i in 0..height {
        for j in 0..width {
            tmp[i * width + j] = k
                .iter()
                .enumerate()
                .map(|(t, w)| w * pixels[i * width + clampi(j as isize + t as isize - r, width)] as f64)
                .sum();
        }
    }
    let mut out = vec![0.0f32; height * width];
    for i in 0..height {
        for j in 0..width {
            out[i * width + j] = k
                .iter()
                .enumerate()
                .map(|(t, w)| w * tmp[clampi(i as isize + t as isize - r, height) * width + j])
                .sum::<f64>() as f32;
        }
    }
    out
}

fn block_average(pixels: &[f32], size: usize, f: usize) -> Vec<f64> {
    let s = size / f;
    let mut out = vec![0.0; s * s];
    for i in 0..size {
        for j in 0..size {
            out[(i / f) * s + j / f] += pixels[i * size + j] as f64;
        }
    }
    let area = (f * f) as f64;
    out.iter_mut().for_each(|v| *v /= area);
    out
}

/// Bilinear upsampling with half-pixel centres and edge clamping.
fn bilinear_up(small: &[f64], s: usize, f: usize) -> Vec<f32> {
    let size = s * f;
    let coord = |i: usize| {
        let y = ((i as f64 + 0.5) / f as f64 - 0.5).clamp(0.0, (s - 1) as f64);
        let y0 = y.floor() as usize;
        (y0, (y0 + 1).min(s - 1), y - y0 as f64)
    };
    let mut out = Vec::with_capacity(size * size);
    for i in 0..size {
        let (y0, y1, wy) = coord(i);
        for j in 0..size {
            let (x0, x1, wx) = coord(j);
            let top = small[y0 * s + x0] * (1.0 - wx) + small[y0 * s + x1] * wx;
            let bot = small[y1 * s + x0] * (1.0 - wx) + small[y1 * s + x1] * wx;
            out.push((top * (1.0 - wy) + bot * wy) as f32);
        }
    }
    out
}

fn check_slice(s: &Slice, cfg: &PhantomConfig) -> Result<(), DataError> {
    if s.height != s.width || !s.height.is_multiple_of(cfg.lf_downsample_factor) {
        return Err(DataError::Config {
            field: "lf_downsample_factor",
            message: format!(
                "{} does not divide the {}x{} slice {}",
                cfg.lf_downsample_factor,
                s.height,
                s.width,
                s.key()
            ),
        });
    }
    Ok(())
}

/// The deterministic part of the degradation (no noise, no clamp).
pub fn lowfield_noise_free(s: &Slice, cfg: &PhantomConfig) -> Result<Vec<f32>, DataError> {
    check_slice(s, cfg)?;
    let f = cfg.lf_downsample_factor;
    let blurred = gaussian_blur(&s.pixels, s.height, s.width, cfg.lf_blur_sigma);
    let small = block_average(&blurred, s.height, f);
    Ok(bilinear_up(&small, s.height / f, f))
}

pub fn degrade_to_lowfield(hf: &Volume, cfg: &PhantomConfig) -> Result<Volume, DataError> {
    cfg.validate()?;
    let mut slices = Vec::with_capacity(hf.slices.len());
    for s in &hf.slices {
        let clean = lowfield_noise_free(s, cfg)?;
        let pixels = if cfg.lf_noise_sigma > 0.0 {
            let mut rng = rng_for(
                cfg.seed,
                &[hash_str("lf-noise"), hash_str(&s.volume_id), s.slice_index as u64],
            );
            let noise = Normal::new(0.0, cfg.lf_noise_sigma).map_err(|e| DataError::Config {
                field: "lf_noise_sigma",
                message: e.to_string(),
            })?;
            clean
                .iter()
                .map(|&v| (v as f64 + noise.sample(&mut rng)).clamp(0.0, 1.0) as f32)
                .collect()
        } else {
            clean.iter().map(|v| v.clamp(0.0, 1.0)).collect()
        };
        slices.push(s.with_pixels(pixels, IntensityRange::Unit));
    }
    Ok(Volume {
        slices,
        field_strength: FieldStrength::Low,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::generate_phantom_volume;

    #[test]
    fn identity_degradation() {
        let cfg = PhantomConfig {
            lf_noise_sigma: 0.0,
            lf_blur_sigma: 1e-3,
            lf_downsample_factor: 1,
            ..Default::default()
        };
        let hf = generate_phantom_volume(&cfg, 0).unwrap();
        let lf = degrade_to_lowfield(&hf, &cfg).unwrap();
        for (a, b) in hf.slices.iter().zip(&lf.slices) {
            for (x, y) in a.pixels.iter().zip(&b.pixels) {
                assert!((x - y).abs() <= 1e-6, "{x} vs {y}");
            }
        }
        assert_eq!(lf.field_strength, FieldStrength::Low);
    }

    #[test]
    fn blur_preserves_constants_and_mass_in_interior() {
        let p = vec![0.7f32; 100];
        assert!(gaussian_blur(&p, 10, 10, 1.5).iter().all(|v| (v - 0.7).abs() < 1e-6));
    }

    #[test]
    fn bilinear_of_constant_is_constant() {
        let small = vec![0.25; 16];
        assert!(bilinear_up(&small, 4, 4).iter().all(|&v| v == 0.25));
    }

    #[test]
    fn noise_std_matches_config() {
        let cfg = PhantomConfig {
            lf_noise_sigma: 0.1,
            ..Default::default()
        };
        let (mut sum, mut sq, mut n) = (0.0f64, 0.0f64, 0usize);
        let mut slices = 0;
        for vs in 0..4 {
            let hf = generate_phantom_volume(&cfg, vs).unwrap();
            let lf = degrade_to_lowfield(&hf, &cfg).unwrap();
            for (h, l) in hf.slices.iter().zip(&lf.slices) {
                let clean = lowfield_noise_free(h, &cfg).unwrap();
                // away from the clamp bounds the residual is the pure noise
                for (&c, &v) in clean.iter().zip(&l.pixels) {
                    if (0.35..=0.65).contains(&c) {
                        let r = (v - c) as f64;
                        sum += r;
                        sq += r * r;
                        n += 1;
                    }
                }
                slices += 1;
            }
        }
        assert!(slices >= 64);
        let mean = sum / n as f64;
        let std = (sq / n as f64 - mean * mean).sqrt();
        assert!((std - 0.1).abs() <= 0.01, "std {std} over {n} pixels");
    }

    #[test]
    fn non_dividing_factor_is_rejected() {
        let cfg = PhantomConfig::default();
        let hf = generate_phantom_volume(&cfg, 0).unwrap();
        let bad = PhantomConfig {
            lf_downsample_factor: 3,
            ..cfg
        };
        assert!(matches!(
            degrade_to_lowfield(&hf, &bad),
            Err(DataError::Config { field: "lf_downsample_factor", .. })
        ));
    }
}
