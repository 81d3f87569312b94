//! Forward/backward kernels for the spatial ops. All buffers are NCHW row-major.

use crate::tensor::{gemm, Layout, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_channels: usize,
    pub out_channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeometry {
    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.pad - self.kernel) / self.stride + 1
    }

    fn patch_len(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    fn out_pixels(&self) -> usize {
        self.out_height() * self.out_width()
    }
}

/// Output columns `ox` whose input column `ox*s + kx - p` lies inside `[0, w)`.
fn valid_range(out_len: usize, in_len: usize, s: usize, kx: usize, p: usize) -> (usize, usize) {
    // smallest ox with ox*s + kx >= p
    let lo = if kx >= p { 0 } else { (p - kx).div_ceil(s) };
    // largest ox with ox*s + kx - p <= in_len - 1
    let hi = if in_len + p > kx {
        ((in_len + p - kx - 1) / s + 1).min(out_len)
    } else {
        0
    };
    (lo.min(hi), hi)
}

/// Unfolds one image `[C, H, W]` into `[C·k·k, OH·OW]`.
fn im2col<T: Scalar>(x: &[T], geo: &ConvGeometry, cols: &mut [T]) {
    let (h, w, k, s, p) = (geo.height, geo.width, geo.kernel, geo.stride, geo.pad);
    let (oh, ow) = (geo.out_height(), geo.out_width());
    let mut row = 0;
    for c in 0..geo.in_channels {
        let plane = &x[c * h * w..(c + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let (lo, hi) = valid_range(ow, w, s, kx, p);
                let dst = &mut cols[row * oh * ow..(row + 1) * oh * ow];
                for oy in 0..oh {
                    let iy = (oy * s + ky) as isize - p as isize;
                    let line = &mut dst[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= h as isize {
                        line.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    line[..lo].fill(T::zero());
                    line[hi..].fill(T::zero());
                    if lo < hi {
                        let start = lo * s + kx - p;
                        if s == 1 {
                            line[lo..hi].copy_from_slice(&src[start..start + (hi - lo)]);
                        } else {
                            for (v, &sv) in line[lo..hi].iter_mut().zip(src[start..].iter().step_by(s)) {
                                *v = sv;
                            }
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters-adds `[C·k·k, OH·OW]` back into `[C, H, W]`.
fn col2im<T: Scalar>(cols: &[T], geo: &ConvGeometry, x: &mut [T]) {
    let (h, w, k, s, p) = (geo.height, geo.width, geo.kernel, geo.stride, geo.pad);
    let (oh, ow) = (geo.out_height(), geo.out_width());
    let mut row = 0;
    for c in 0..geo.in_channels {
        let plane = &mut x[c * h * w..(c + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let (lo, hi) = valid_range(ow, w, s, kx, p);
                let src = &cols[row * oh * ow..(row + 1) * oh * ow];
                for oy in 0..oh {
                    let iy = (oy * s + ky) as isize - p as isize;
                    if iy < 0 || iy >= h as isize || lo >= hi {
                        continue;
                    }
                    let line = &src[oy * ow + lo..oy * ow + hi];
                    let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    let start = lo * s + kx - p;
                    if s == 1 {
                        for (d, &v) in dst[start..start + (hi - lo)].iter_mut().zip(line) {
                            *d = *d + v;
                        }
                    } else {
                        for (d, &v) in dst[start..].iter_mut().step_by(s).zip(line) {
                            *d = *d + v;
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

pub fn conv2d_forward<T: Scalar>(
    x: &[T],
    batch: usize,
    geo: &ConvGeometry,
    weight: &[T],
    bias: Option<&[T]>,
) -> Vec<T> {
    let kk = geo.patch_len();
    let op = geo.out_pixels();
    let in_len = geo.in_channels * geo.height * geo.width;
    let out_len = geo.out_channels * op;
    let mut out = vec![T::zero(); batch * out_len];
    let mut cols = vec![T::zero(); kk * op];
    for n in 0..batch {
        im2col(&x[n * in_len..(n + 1) * in_len], geo, &mut cols);
        let y = &mut out[n * out_len..(n + 1) * out_len];
        gemm(
            geo.out_channels,
            kk,
            op,
            weight,
            Layout::Normal,
            &cols,
            Layout::Normal,
            T::zero(),
            y,
        );
        if let Some(b) = bias {
            for (co, &bv) in b.iter().enumerate() {
                for v in &mut y[co * op..(co + 1) * op] {
                    *v = *v + bv;
                }
            }
        }
    }
    out
}

pub struct ConvGrads<T> {
    pub input: Option<Vec<T>>,
    pub weight: Option<Vec<T>>,
    pub bias: Option<Vec<T>>,
}

#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward<T: Scalar>(
    x: &[T],
    batch: usize,
    geo: &ConvGeometry,
    weight: &[T],
    dy: &[T],
    need_input: bool,
    need_weight: bool,
    need_bias: bool,
) -> ConvGrads<T> {
    let kk = geo.patch_len();
    let op = geo.out_pixels();
    let in_len = geo.in_channels * geo.height * geo.width;
    let out_len = geo.out_channels * op;
    let mut dx = need_input.then(|| vec![T::zero(); batch * in_len]);
    let mut dw = need_weight.then(|| vec![T::zero(); geo.out_channels * kk]);
    let mut cols = vec![T::zero(); kk * op];
    for n in 0..batch {
        let dy_n = &dy[n * out_len..(n + 1) * out_len];
        if let Some(dw) = dw.as_mut() {
            im2col(&x[n * in_len..(n + 1) * in_len], geo, &mut cols);
            gemm(
                geo.out_channels,
                op,
                kk,
                dy_n,
                Layout::Normal,
                &cols,
                Layout::Transposed,
                T::one(),
                dw,
            );
        }
        if let Some(dx) = dx.as_mut() {
            gemm(
                kk,
                geo.out_channels,
                op,
                weight,
                Layout::Transposed,
                dy_n,
                Layout::Normal,
                T::zero(),
                &mut cols,
            );
            col2im(&cols, geo, &mut dx[n * in_len..(n + 1) * in_len]);
        }
    }
    let db = need_bias.then(|| {
        let mut db = vec![T::zero(); geo.out_channels];
        for n in 0..batch {
            for (co, acc) in db.iter_mut().enumerate() {
                let start = n * out_len + co * op;
                *acc = *acc + dy[start..start + op].iter().copied().sum::<T>();
            }
        }
        db
    });
    ConvGrads {
        input: dx,
        weight: dw,
        bias: db,
    }
}

/// Nearest-neighbour ×2 upsampling of `planes` planes of size `h × w`.
pub fn upsample2x_forward<T: Scalar>(x: &[T], planes: usize, h: usize, w: usize) -> Vec<T> {
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = vec![T::zero(); planes * oh * ow];
    for p in 0..planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
        for oy in 0..oh {
            let srow = &src[(oy / 2) * w..(oy / 2 + 1) * w];
            for (ox, v) in dst[oy * ow..(oy + 1) * ow].iter_mut().enumerate() {
                *v = srow[ox / 2];
            }
        }
    }
    out
}

pub fn upsample2x_backward<T: Scalar>(dy: &[T], planes: usize, h: usize, w: usize) -> Vec<T> {
    let (oh, ow) = (2 * h, 2 * w);
    let mut dx = vec![T::zero(); planes * h * w];
    for p in 0..planes {
        let src = &dy[p * oh * ow..(p + 1) * oh * ow];
        let dst = &mut dx[p * h * w..(p + 1) * h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                let d = &mut dst[(oy / 2) * w + ox / 2];
                *d = *d + src[oy * ow + ox];
            }
        }
    }
    dx
}

/// Per-plane normalisation to zero mean / unit variance. Returns the output and
/// the inverse standard deviation of each plane.
pub fn instance_norm_forward<T: Scalar>(x: &[T], plane: usize, eps: f64) -> (Vec<T>, Vec<T>) {
    let planes = x.len() / plane;
    let mut out = vec![T::zero(); x.len()];
    let mut inv_std = Vec::with_capacity(planes);
    let n = T::of(plane as f64);
    for p in 0..planes {
        let src = &x[p * plane..(p + 1) * plane];
        let mean = src.iter().copied().sum::<T>() / n;
        let var = src.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
        let inv = T::one() / (var + T::of(eps)).sqrt();
        for (o, &v) in out[p * plane..(p + 1) * plane].iter_mut().zip(src) {
            *o = (v - mean) * inv;
        }
        inv_std.push(inv);
    }
    (out, inv_std)
}

pub fn instance_norm_backward<T: Scalar>(y: &[T], inv_std: &[T], dy: &[T], plane: usize) -> Vec<T> {
    let mut dx = vec![T::zero(); y.len()];
    let n = T::of(plane as f64);
    for (p, &inv) in inv_std.iter().enumerate() {
        let ys = &y[p * plane..(p + 1) * plane];
        let gs = &dy[p * plane..(p + 1) * plane];
        let mean_g = gs.iter().copied().sum::<T>() / n;
        let mean_gy = ys.iter().zip(gs).map(|(&a, &b)| a * b).sum::<T>() / n;
        for ((d, &yv), &gv) in dx[p * plane..(p + 1) * plane].iter_mut().zip(ys).zip(gs) {
            *d = inv * (gv - mean_g - yv * mean_gy);
        }
    }
    dx
}
