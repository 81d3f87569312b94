//! Soft-ellipse head phantoms whose geometry drifts smoothly from slice to slice.

use std::f64::consts::PI;

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{Contrast, DataError, FieldStrength, IntensityRange, Slice, Volume};
use crate::rng::{hash_str, rng_for, Rng};

/// Inclusive range for the number of ellipses per volume (the head counts as one).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EllipseCount {
    pub min: usize,
    pub max: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhantomConfig {
    pub image_size: usize,
    pub num_volumes: usize,
    pub slices_per_volume: usize,
    pub num_ellipses: EllipseCount,
    pub lesion_probability: f64,
    pub lf_blur_sigma: f64,
    pub lf_noise_sigma: f64,
    pub lf_downsample_factor: usize,
    pub block_size: usize,
    pub contrast: Contrast,
    pub seed: u64,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            num_volumes: 20,
            slices_per_volume: 16,
            num_ellipses: EllipseCount { min: 4, max: 7 },
            lesion_probability: 0.3,
            lf_blur_sigma: 1.0,
            lf_noise_sigma: 0.05,
            lf_downsample_factor: 2,
            block_size: 8,
            contrast: Contrast::T1,
            seed: 0,
        }
    }
}

fn bad(field: &'static str, message: impl Into<String>) -> DataError {
    DataError::Config {
        field,
        message: message.into(),
    }
}

impl PhantomConfig {
    pub fn validate(&self) -> Result<(), DataError> {
        if self.image_size == 0 {
            return Err(bad("image_size", "must be positive"));
        }
        if self.block_size == 0 {
            return Err(bad("block_size", "must be positive"));
        }
        if !self.image_size.is_multiple_of(self.block_size) {
            return Err(bad(
                "block_size",
                format!("{} does not divide image_size {}", self.block_size, self.image_size),
            ));
        }
        if self.lf_downsample_factor == 0 {
            return Err(bad("lf_downsample_factor", "must be >= 1"));
        }
        if !self.image_size.is_multiple_of(self.lf_downsample_factor) {
            return Err(bad(
                "lf_downsample_factor",
                format!("{} does not divide image_size {}", self.lf_downsample_factor, self.image_size),
            ));
        }
        if self.num_volumes == 0 {
            return Err(bad("num_volumes", "must be >= 1"));
        }
        if self.slices_per_volume == 0 {
            return Err(bad("slices_per_volume", "must be >= 1"));
        }
        if self.num_ellipses.min > self.num_ellipses.max {
            return Err(bad("num_ellipses", "min exceeds max"));
        }
        if !(0.0..=1.0).contains(&self.lesion_probability) {
            return Err(bad("lesion_probability", "must lie in [0, 1]"));
        }
        if !(self.lf_blur_sigma > 0.0 && self.lf_blur_sigma.is_finite()) {
            return Err(bad("lf_blur_sigma", "must be positive and finite"));
        }
        if !(self.lf_noise_sigma >= 0.0 && self.lf_noise_sigma.is_finite()) {
            return Err(bad("lf_noise_sigma", "must be non-negative and finite"));
        }
        Ok(())
    }
}

/// One ellipse in normalised coordinates (`[-1, 1]` across the image).
#[derive(Debug, Clone, Copy)]
struct Ellipse {
    cx: f64,
    cy: f64,
    a: f64,
    b: f64,
    angle: f64,
    intensity: f64,
}

impl Ellipse {
    /// Anti-aliased coverage of pixel centre `(x, y)`, ~one pixel wide edge.
    fn coverage(&self, x: f64, y: f64, pixel: f64) -> f64 {
        let (s, c) = self.angle.sin_cos();
        let (dx, dy) = (x - self.cx, y - self.cy);
        let u = (dx * c + dy * s) / self.a;
        let v = (-dx * s + dy * c) / self.b;
        let rho = (u * u + v * v).sqrt();
        let dist = (1.0 - rho) * self.a.min(self.b);
        1.0 / (1.0 + (-dist / (0.5 * pixel)).exp())
    }
}

/// Drift state of an inner structure.
#[derive(Debug, Clone, Copy)]
struct Walker {
    shape: Ellipse,
    vx: f64,
    vy: f64,
    spin: f64,
    growth: f64,
}

struct Lesion {
    cx: f64,
    cy: f64,
    radius: f64,
    first: usize,
    last: usize,
}

/// Relative head size at slice position `t ∈ [0, 1]`.
fn head_scale(t: f64) -> f64 {
    0.55 + 0.45 * (PI * (0.1 + 0.8 * t)).sin()
}

fn render(shapes: &[Ellipse], size: usize) -> Vec<f32> {
    let pixel = 2.0 / size as f64;
    let mut out = Vec::with_capacity(size * size);
    for i in 0..size {
        let y = (i as f64 + 0.5) * pixel - 1.0;
        for j in 0..size {
            let x = (j as f64 + 0.5) * pixel - 1.0;
            let v: f64 = shapes.iter().map(|e| e.intensity * e.coverage(x, y, pixel)).sum();
            out.push(v.clamp(0.0, 1.0) as f32);
        }
    }
    out
}

/// High-field phantom volume `vol{volume_seed:04}`.
pub fn generate_phantom_volume(cfg: &PhantomConfig, volume_seed: u64) -> Result<Volume, DataError> {
    cfg.validate()?;
    let mut rng = rng_for(cfg.seed, &[hash_str("phantom"), volume_seed]);
    let volume_id = format!("vol{volume_seed:04}");
    let n = cfg.slices_per_volume;
    let count = rng.random_range(cfg.num_ellipses.min..=cfg.num_ellipses.max);
    let jitter = Normal::new(0.0, 1.0).expect("unit normal");

    let head = (count > 0).then(|| Ellipse {
        cx: rng.random_range(-0.05..0.05),
        cy: rng.random_range(-0.05..0.05),
        a: rng.random_range(0.62..0.75),
        b: rng.random_range(0.72..0.85),
        angle: rng.random_range(-0.2..0.2),
        intensity: rng.random_range(0.45..0.55),
    });
    let polarity = if cfg.contrast == Contrast::T2 { -1.0 } else { 1.0 };
    let mut walkers: Vec<Walker> = (1..count).map(|_| new_walker(&mut rng, polarity)).collect();
    let lesion = (head.is_some() && rng.random_bool(cfg.lesion_probability)).then(|| {
        let r = rng.random_range(0.0..0.45);
        let phi = rng.random_range(0.0..2.0 * PI);
        let len = rng.random_range(3..=6).min(n);
        let first = rng.random_range(0..=n - len);
        Lesion {
            cx: r * phi.cos(),
            cy: r * phi.sin(),
            radius: rng.random_range(0.05..0.08),
            first,
            last: first + len - 1,
        }
    });

    let mut slices = Vec::with_capacity(n);
    for idx in 0..n {
        let t = if n > 1 { idx as f64 / (n - 1) as f64 } else { 0.5 };
        let mut shapes = Vec::with_capacity(count + 1);
        if let Some(h) = head {
            let s = head_scale(t);
            shapes.push(Ellipse {
                a: h.a * s,
                b: h.b * s,
                ..h
            });
            for w in &walkers {
                let e = w.shape;
                shapes.push(Ellipse {
                    cx: h.cx + e.cx * s,
                    cy: h.cy + e.cy * s,
                    a: e.a * s,
                    b: e.b * s,
                    ..e
                });
            }
            if let Some(l) = lesion.as_ref().filter(|l| (l.first..=l.last).contains(&idx)) {
                shapes.push(Ellipse {
                    cx: h.cx + l.cx * s,
                    cy: h.cy + l.cy * s,
                    a: l.radius,
                    b: l.radius,
                    angle: 0.0,
                    intensity: 0.45,
                });
            }
        }
        let pixels = render(&shapes, cfg.image_size);
        slices.push(Slice::new(
            cfg.image_size,
            cfg.image_size,
            pixels,
            IntensityRange::Unit,
            cfg.contrast,
            volume_id.clone(),
            idx,
        )?);
        for w in &mut walkers {
            step_walker(w, &mut rng, &jitter);
        }
    }
    Ok(Volume {
        slices,
        field_strength: FieldStrength::High,
    })
}

fn new_walker(rng: &mut Rng, polarity: f64) -> Walker {
    let r = rng.random_range(0.0..0.55);
    let phi = rng.random_range(0.0..2.0 * PI);
    let magnitude = rng.random_range(0.12..0.3);
    let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
    Walker {
        shape: Ellipse {
            cx: r * phi.cos(),
            cy: r * phi.sin(),
            a: rng.random_range(0.08..0.25),
            b: rng.random_range(0.08..0.25),
            angle: rng.random_range(0.0..PI),
            intensity: polarity * sign * magnitude,
        },
        vx: rng.random_range(-0.04..0.04),
        vy: rng.random_range(-0.04..0.04),
        spin: rng.random_range(-0.12..0.12),
        growth: rng.random_range(-0.05..0.05),
    }
}

fn step_walker(w: &mut Walker, rng: &mut Rng, jitter: &Normal<f64>) {
    let e = &mut w.shape;
    e.cx = (e.cx + w.vx + 0.01 * jitter.sample(rng)).clamp(-0.6, 0.6);
    e.cy = (e.cy + w.vy + 0.01 * jitter.sample(rng)).clamp(-0.6, 0.6);
    e.angle += w.spin;
    let g = (w.growth + 0.02 * jitter.sample(rng)).exp();
    e.a = (e.a * g).clamp(0.05, 0.3);
    e.b = (e.b * g).clamp(0.05, 0.3);
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mean_abs_diff(a: &Slice, b: &Slice) -> f64 {
        a.pixels.iter().zip(&b.pixels).map(|(x, y)| (x - y).abs() as f64).sum::<f64>() / a.pixels.len() as f64
    }

    #[test]
    fn empty_scene_is_all_zero() {
        let cfg = PhantomConfig {
            num_ellipses: EllipseCount { min: 0, max: 0 },
            lesion_probability: 0.0,
            ..Default::default()
        };
        let v = generate_phantom_volume(&cfg, 3).unwrap();
        assert_eq!(v.slices.len(), cfg.slices_per_volume);
        assert!(v.slices.iter().all(|s| s.pixels.iter().all(|&p| p == 0.0)));
    }

    #[test]
    fn generation_is_deterministic() {
        let cfg = PhantomConfig::default();
        assert_eq!(generate_phantom_volume(&cfg, 5).unwrap(), generate_phantom_volume(&cfg, 5).unwrap());
        assert_ne!(generate_phantom_volume(&cfg, 5).unwrap(), generate_phantom_volume(&cfg, 6).unwrap());
    }

    #[test]
    fn pixels_are_unit_range_with_metadata() {
        let v = generate_phantom_volume(&PhantomConfig::default(), 1).unwrap();
        for (i, s) in v.slices.iter().enumerate() {
            assert_eq!(s.slice_index, i);
            assert_eq!(s.volume_id, "vol0001");
            assert!(s.pixels.iter().all(|p| (0.0..=1.0).contains(p)));
        }
        assert_eq!(v.field_strength, FieldStrength::High);
    }

    #[test]
    fn adjacent_slices_are_closer_than_distant_ones() {
        let cfg = PhantomConfig::default();
        let (mut near, mut far, mut n_near, mut n_far) = (0.0, 0.0, 0, 0);
        for vs in 0..20 {
            let v = generate_phantom_volume(&cfg, vs).unwrap();
            for i in 0..v.slices.len() {
                if i + 1 < v.slices.len() {
                    near += mean_abs_diff(&v.slices[i], &v.slices[i + 1]);
                    n_near += 1;
                }
                if i + 5 < v.slices.len() {
                    far += mean_abs_diff(&v.slices[i], &v.slices[i + 5]);
                    n_far += 1;
                }
            }
        }
        assert!((near / n_near as f64) < far / n_far as f64);
    }

    #[test]
    fn invalid_configs_name_the_field() {
        let cfg = PhantomConfig {
            image_size: 60,
            ..Default::default()
        };
        match cfg.validate() {
            Err(DataError::Config { field, .. }) => assert_eq!(field, "block_size"),
            other => panic!("unexpected {other:?}"),
        }
        let cfg = PhantomConfig {
            lf_downsample_factor: 3,
            image_size: 64,
            block_size: 8,
            ..Default::default()
        };
        assert!(matches!(
            cfg.validate(),
            Err(DataError::Config { field: "lf_downsample_factor", .. })
        ));
    }
}
