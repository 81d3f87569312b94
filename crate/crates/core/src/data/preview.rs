//! Lossy 8-bit grayscale export for eyeballing slices. Nothing reads these back.

use std::path::Path;

use super::{DataError, IntensityRange, Slice};
use crate::io_util::write_atomic;

/// Maps the slice's declared range onto `0..=255` (raw slices are min-max
/// scaled first).
pub fn to_gray8(s: &Slice) -> Vec<u8> {
    let unit = match s.intensity_range {
        IntensityRange::Raw => super::normalize_slice(s, IntensityRange::Unit).pixels,
        IntensityRange::Unit => s.pixels.clone(),
        IntensityRange::Signed => s.pixels.iter().map(|&v| (v + 1.0) / 2.0).collect(),
    };
    unit.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect()
}

pub fn write_preview_png(s: &Slice, path: &Path) -> Result<(), DataError> {
    let io = |e: std::io::Error| DataError::Io {
        path: path.to_path_buf(),
        source: e,
    };
    let mut buf = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut buf, s.width as u32, s.height as u32);
        enc.set_color(png::ColorType::Grayscale);
        enc.set_depth(png::BitDepth::Eight);
        let mut w = enc
            .write_header()
            .map_err(|e| io(std::io::Error::other(e)))?;
        w.write_image_data(&to_gray8(s))
            .map_err(|e| io(std::io::Error::other(e)))?;
    }
    write_atomic(path, &buf).map_err(io)
}
