//! Block corruption for the local-structure pretext task: the image is cut
//! into non-overlapping square blocks, a subset is rotated by a multiple of
//! 90° and a disjoint subset is overwritten with a fill value.
//!
//! Rotations are counterclockwise: for an `n × n` block,
//! `rotated[i][j] = block[j][n-1-i]`, so `[[1,2],[3,4]]` becomes `[[2,4],[1,3]]`.
//!
//! A [`CorruptionRecord`] serialises to JSON as
//!
//! ```json
//! {"block_size": 8,
//!  "rotated": [{"row": 0, "col": 3, "angle": 270}],
//!  "masked": [{"row": 5, "col": 1}],
//!  "fill_value": 0.0,
//!  "seed": 17}
//! ```
//!
//! with `row`/`col` counted in blocks.

use std::sync::Arc;

use rand::seq::index::sample;
use rand::Rng as _;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::GATHER_FILL;
use crate::data::Slice;
use crate::rng::{hash_str, rng_for};

#[derive(Debug, Error, PartialEq)]
pub enum CorruptionError {
    #[error("{height}x{width} is not divisible into {block_size}x{block_size} blocks")]
    Indivisible {
        height: usize,
        width: usize,
        block_size: usize,
    },
    #[error("block is {rows}x{cols}; only square blocks can be rotated")]
    NotSquare { rows: usize, cols: usize },
    #[error("invalid corruption fractions: {0}")]
    Fractions(String),
    #[error("record block ({row}, {col}) lies outside the {rows}x{cols} grid")]
    OutOfGrid {
        row: usize,
        col: usize,
        rows: usize,
        cols: usize,
    },
    #[error("{0}")]
    Mismatch(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "u16", into = "u16")]
pub enum Angle {
    Deg90,
    Deg180,
    Deg270,
}

impl Angle {
    pub const ALL: [Angle; 3] = [Angle::Deg90, Angle::Deg180, Angle::Deg270];

    pub fn quarter_turns(self) -> usize {
        match self {
            Self::Deg90 => 1,
            Self::Deg180 => 2,
            Self::Deg270 => 3,
        }
    }

    pub fn inverse(self) -> Angle {
        match self {
            Self::Deg90 => Self::Deg270,
            Self::Deg180 => Self::Deg180,
            Self::Deg270 => Self::Deg90,
        }
    }
}

impl TryFrom<u16> for Angle {
    type Error = String;

    fn try_from(v: u16) -> Result<Self, String> {
        match v {
            90 => Ok(Self::Deg90),
            180 => Ok(Self::Deg180),
            270 => Ok(Self::Deg270),
            _ => Err(format!("rotation angle must be 90, 180 or 270, got {v}")),
        }
    }
}

impl From<Angle> for u16 {
    fn from(a: Angle) -> u16 {
        90 * a.quarter_turns() as u16
    }
}

/// Rotation sense. Everything in the crate uses [`Orientation::CounterClockwise`];
/// the other variant exists so self-tests can prove they catch a flipped convention.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Orientation {
    CounterClockwise,
    Clockwise,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockGrid {
    pub block_size: usize,
    pub rows: usize,
    pub cols: usize,
    pub height: usize,
    pub width: usize,
}

impl BlockGrid {
    pub fn num_blocks(&self) -> usize {
        self.rows * self.cols
    }

    fn check(&self, b: BlockIndex) -> Result<(), CorruptionError> {
        if b.row >= self.rows || b.col >= self.cols {
            return Err(CorruptionError::OutOfGrid {
                row: b.row,
                col: b.col,
                rows: self.rows,
                cols: self.cols,
            });
        }
        Ok(())
    }
}

pub fn partition(height: usize, width: usize, block_size: usize) -> Result<BlockGrid, CorruptionError> {
    if block_size == 0 || height == 0 || width == 0 || !height.is_multiple_of(block_size) || !width.is_multiple_of(block_size) {
        return Err(CorruptionError::Indivisible {
            height,
            width,
            block_size,
        });
    }
    Ok(BlockGrid {
        block_size,
        rows: height / block_size,
        cols: width / block_size,
        height,
        width,
    })
}

pub fn partition_blocks(s: &Slice, block_size: usize) -> Result<BlockGrid, CorruptionError> {
    partition(s.height, s.width, block_size)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlockIndex {
    pub row: usize,
    pub col: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RotatedBlock {
    pub row: usize,
    pub col: usize,
    pub angle: Angle,
}

impl RotatedBlock {
    pub fn index(&self) -> BlockIndex {
        BlockIndex {
            row: self.row,
            col: self.col,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorruptionRecord {
    pub block_size: usize,
    pub rotated: Vec<RotatedBlock>,
    pub masked: Vec<BlockIndex>,
    pub fill_value: f32,
    pub seed: u64,
}

impl CorruptionRecord {
    pub fn is_empty(&self) -> bool {
        self.rotated.is_empty() && self.masked.is_empty()
    }

    /// Checks grid bounds and that rotated and masked blocks are disjoint and unique.
    pub fn validate(&self, grid: &BlockGrid) -> Result<(), CorruptionError> {
        if grid.block_size != self.block_size {
            return Err(CorruptionError::Mismatch(format!(
                "record block size {} vs grid block size {}",
                self.block_size, grid.block_size
            )));
        }
        let mut seen = std::collections::BTreeSet::new();
        for b in self.rotated.iter().map(RotatedBlock::index).chain(self.masked.iter().copied()) {
            grid.check(b)?;
            if !seen.insert(b) {
                return Err(CorruptionError::Mismatch(format!(
                    "block ({}, {}) appears twice in the record",
                    b.row, b.col
                )));
            }
        }
        Ok(())
    }
}

/// Default corruption knobs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorruptionParams {
    pub block_size: usize,
    pub rotate_fraction: f64,
    pub mask_fraction: f64,
    pub fill: f32,
}

impl Default for CorruptionParams {
    fn default() -> Self {
        Self {
            block_size: 8,
            rotate_fraction: 0.15,
            mask_fraction: 0.15,
            fill: 0.0,
        }
    }
}

impl CorruptionParams {
    pub fn validate(&self) -> Result<(), CorruptionError> {
        let (r, m) = (self.rotate_fraction, self.mask_fraction);
        if !(r.is_finite() && m.is_finite()) || r < 0.0 || m < 0.0 {
            return Err(CorruptionError::Fractions(format!(
                "fractions must be finite and >= 0 (rotate {r}, mask {m})"
            )));
        }
        if r + m > 1.0 + 1e-12 {
            return Err(CorruptionError::Fractions(format!("rotate {r} + mask {m} exceeds 1")));
        }
        if !self.fill.is_finite() {
            return Err(CorruptionError::Fractions("fill must be finite".into()));
        }
        Ok(())
    }
}

/// `⌊fraction · blocks⌋`, with a tiny guard so that e.g. `0.3 · 10` gives 3
/// despite binary rounding.
pub fn block_count(fraction: f64, blocks: usize) -> usize {
    ((fraction * blocks as f64 + 1e-9).floor() as usize).min(blocks)
}

/// Draws which blocks to rotate (and by how much) and which to mask.
pub fn sample_record(grid: &BlockGrid, params: &CorruptionParams, seed: u64) -> Result<CorruptionRecord, CorruptionError> {
    params.validate()?;
    if params.block_size != grid.block_size {
        return Err(CorruptionError::Mismatch(format!(
            "params block size {} vs grid block size {}",
            params.block_size, grid.block_size
        )));
    }
    let total = grid.num_blocks();
    let n_rot = block_count(params.rotate_fraction, total);
    let n_mask = block_count(params.mask_fraction, total);
    if n_rot + n_mask > total {
        return Err(CorruptionError::Fractions(format!(
            "{n_rot} rotated + {n_mask} masked blocks exceed {total}"
        )));
    }
    let mut rng = rng_for(seed, &[hash_str("corruption")]);
    let chosen = sample(&mut rng, total, n_rot + n_mask).into_vec();
    let at = |k: usize| BlockIndex {
        row: k / grid.cols,
        col: k % grid.cols,
    };
    let rotated = chosen[..n_rot]
        .iter()
        .map(|&k| RotatedBlock {
            row: at(k).row,
            col: at(k).col,
            angle: Angle::ALL[rng.random_range(0..3)],
        })
        .collect();
    let masked = chosen[n_rot..].iter().map(|&k| at(k)).collect();
    Ok(CorruptionRecord {
        block_size: grid.block_size,
        rotated,
        masked,
        fill_value: params.fill,
        seed,
    })
}

/// Exact rotation of a row-major `n × n` block.
pub fn rotate_block<T: Copy>(block: &[T], rows: usize, cols: usize, angle: Angle) -> Result<Vec<T>, CorruptionError> {
    rotate_block_with(block, rows, cols, angle, Orientation::CounterClockwise)
}

pub fn rotate_block_with<T: Copy>(
    block: &[T],
    rows: usize,
    cols: usize,
    angle: Angle,
    orientation: Orientation,
) -> Result<Vec<T>, CorruptionError> {
    if rows != cols || block.len() != rows * cols {
        return Err(CorruptionError::NotSquare { rows, cols });
    }
    let n = rows;
    let turns = match orientation {
        Orientation::CounterClockwise => angle.quarter_turns(),
        Orientation::Clockwise => 4 - angle.quarter_turns(),
    };
    let mut cur = block.to_vec();
    for _ in 0..turns {
        let mut next = cur.clone();
        for i in 0..n {
            for j in 0..n {
                next[i * n + j] = cur[j * n + (n - 1 - i)];
            }
        }
        cur = next;
    }
    Ok(cur)
}

fn read_block(pixels: &[f32], width: usize, bs: usize, b: BlockIndex) -> Vec<f32> {
    let mut out = Vec::with_capacity(bs * bs);
    for i in 0..bs {
        let start = (b.row * bs + i) * width + b.col * bs;
        out.extend_from_slice(&pixels[start..start + bs]);
    }
    out
}

fn write_block(pixels: &mut [f32], width: usize, bs: usize, b: BlockIndex, block: &[f32]) {
    for i in 0..bs {
        let start = (b.row * bs + i) * width + b.col * bs;
        pixels[start..start + bs].copy_from_slice(&block[i * bs..(i + 1) * bs]);
    }
}

/// Applies a record to a row-major `height × width` image.
pub fn apply_record(
    pixels: &[f32],
    height: usize,
    width: usize,
    rec: &CorruptionRecord,
    orientation: Orientation,
) -> Result<Vec<f32>, CorruptionError> {
    let grid = partition(height, width, rec.block_size)?;
    rec.validate(&grid)?;
    let bs = rec.block_size;
    let mut out = pixels.to_vec();
    for r in &rec.rotated {
        let block = read_block(pixels, width, bs, r.index());
        let rotated = rotate_block_with(&block, bs, bs, r.angle, orientation)?;
        write_block(&mut out, width, bs, r.index(), &rotated);
    }
    for &m in &rec.masked {
        write_block(&mut out, width, bs, m, &vec![rec.fill_value; bs * bs]);
    }
    Ok(out)
}

pub fn corrupt(s: &Slice, params: &CorruptionParams, seed: u64) -> Result<(Slice, CorruptionRecord), CorruptionError> {
    let grid = partition_blocks(s, params.block_size)?;
    let rec = sample_record(&grid, params, seed)?;
    let pixels = apply_record(&s.pixels, s.height, s.width, &rec, Orientation::CounterClockwise)?;
    Ok((s.with_pixels(pixels, s.intensity_range), rec))
}

/// Undoes `rec` on `c`: rotations are reversed, masked blocks are copied
/// back from `original`.
pub fn invert_corruption(c: &Slice, rec: &CorruptionRecord, original: &Slice) -> Result<Slice, CorruptionError> {
    if (c.height, c.width) != (original.height, original.width) {
        return Err(CorruptionError::Mismatch(format!(
            "corrupted {}x{} vs original {}x{}",
            c.height, c.width, original.height, original.width
        )));
    }
    let grid = partition_blocks(c, rec.block_size)?;
    rec.validate(&grid)?;
    let bs = rec.block_size;
    let mut out = c.pixels.clone();
    for r in &rec.rotated {
        let block = read_block(&c.pixels, c.width, bs, r.index());
        write_block(&mut out, c.width, bs, r.index(), &rotate_block(&block, bs, bs, r.angle.inverse())?);
    }
    for &m in &rec.masked {
        write_block(&mut out, c.width, bs, m, &read_block(&original.pixels, c.width, bs, m));
    }
    Ok(c.with_pixels(out, c.intensity_range))
}

/// Source-index map of `rec` for one `height × width` plane at `offset`
/// inside a flat batch: `out[k] = in[map[k]]`, masked pixels map to
/// [`GATHER_FILL`]. This is the in-graph route; [`apply_record`] is the
/// block-copy route.
pub fn gather_map(height: usize, width: usize, rec: &CorruptionRecord, offset: usize, map: &mut Vec<u32>) -> Result<(), CorruptionError> {
    let grid = partition(height, width, rec.block_size)?;
    rec.validate(&grid)?;
    let start = map.len();
    map.extend((0..height * width).map(|k| (offset + k) as u32));
    let bs = rec.block_size;
    let n = bs - 1;
    for r in &rec.rotated {
        let (r0, c0) = (r.row * bs, r.col * bs);
        for i in 0..bs {
            for j in 0..bs {
                let (si, sj) = match r.angle {
                    Angle::Deg90 => (j, n - i),
                    Angle::Deg180 => (n - i, n - j),
                    Angle::Deg270 => (n - j, i),
                };
                map[start + (r0 + i) * width + c0 + j] = (offset + (r0 + si) * width + c0 + sj) as u32;
            }
        }
    }
    for m in &rec.masked {
        for i in 0..bs {
            let row = start + (m.row * bs + i) * width + m.col * bs;
            map[row..row + bs].fill(GATHER_FILL);
        }
    }
    Ok(())
}

/// Corruption of a whole `[N, 1, H, W]` batch, one record per sample, with
/// per-sample seeds derived from `seed`.
#[derive(Debug, Clone)]
pub struct BatchCorruption {
    pub records: Vec<CorruptionRecord>,
    pub map: Arc<[u32]>,
    pub fill: f32,
}

pub fn corrupt_batch_plan(
    batch: usize,
    height: usize,
    width: usize,
    params: &CorruptionParams,
    seed: u64,
) -> Result<BatchCorruption, CorruptionError> {
    let grid = partition(height, width, params.block_size)?;
    let mut records = Vec::with_capacity(batch);
    let mut map = Vec::with_capacity(batch * height * width);
    for n in 0..batch {
        let rec = sample_record(&grid, params, crate::rng::derive_seed(seed, &[n as u64]))?;
        gather_map(height, width, &rec, n * height * width, &mut map)?;
        records.push(rec);
    }
    Ok(BatchCorruption {
        records,
        map: map.into(),
        fill: params.fill,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Contrast, IntensityRange};

    fn ramp(h: usize, w: usize) -> Slice {
        let px = (0..h * w).map(|k| k as f32 / (h * w) as f32).collect();
        Slice::new(h, w, px, IntensityRange::Unit, Contrast::T1, "v", 0).unwrap()
    }

    #[test]
    fn partition_dims() {
        let g = partition(64, 64, 8).unwrap();
        assert_eq!((g.rows, g.cols), (8, 8));
        let g = partition(8, 8, 8).unwrap();
        assert_eq!((g.rows, g.cols), (1, 1));
        assert!(partition(10, 8, 8).is_err());
    }

    #[test]
    fn rotation_convention_is_counterclockwise() {
        let b = [1, 2, 3, 4];
        assert_eq!(rotate_block(&b, 2, 2, Angle::Deg90).unwrap(), vec![2, 4, 1, 3]);
        assert_eq!(rotate_block(&b, 2, 2, Angle::Deg180).unwrap(), vec![4, 3, 2, 1]);
        assert_eq!(rotate_block(&b, 2, 2, Angle::Deg270).unwrap(), vec![3, 1, 4, 2]);
        assert_eq!(
            rotate_block_with(&b, 2, 2, Angle::Deg90, Orientation::Clockwise).unwrap(),
            vec![3, 1, 4, 2]
        );
        assert!(rotate_block(&[1, 2, 3, 4, 5, 6], 2, 3, Angle::Deg90).is_err());
    }

    #[test]
    fn rotations_form_cyclic_group() {
        let b: Vec<u32> = (0..25).collect();
        let twice = rotate_block(&rotate_block(&b, 5, 5, Angle::Deg180).unwrap(), 5, 5, Angle::Deg180).unwrap();
        assert_eq!(twice, b);
        for a in Angle::ALL {
            let back = rotate_block(&rotate_block(&b, 5, 5, a).unwrap(), 5, 5, a.inverse()).unwrap();
            assert_eq!(back, b);
        }
        let mut cur = b.clone();
        for _ in 0..4 {
            cur = rotate_block(&cur, 5, 5, Angle::Deg90).unwrap();
        }
        assert_eq!(cur, b);
        assert_eq!(rotate_block(&[7; 9], 3, 3, Angle::Deg270).unwrap(), vec![7; 9]);
    }

    #[test]
    fn zero_fractions_are_identity() {
        let s = ramp(16, 16);
        let p = CorruptionParams {
            rotate_fraction: 0.0,
            mask_fraction: 0.0,
            ..Default::default()
        };
        let (c, rec) = corrupt(&s, &p, 3).unwrap();
        assert_eq!(c, s);
        assert!(rec.is_empty());
        assert_eq!(invert_corruption(&c, &rec, &s).unwrap(), s);
    }

    #[test]
    fn full_mask_gives_fill() {
        let s = ramp(16, 16);
        let p = CorruptionParams {
            rotate_fraction: 0.0,
            mask_fraction: 1.0,
            fill: 0.0,
            ..Default::default()
        };
        let (c, rec) = corrupt(&s, &p, 3).unwrap();
        assert!(c.pixels.iter().all(|&v| v == 0.0));
        assert_eq!(rec.masked.len(), 4);
    }

    #[test]
    fn fraction_sum_above_one_is_rejected() {
        let p = CorruptionParams {
            rotate_fraction: 0.6,
            mask_fraction: 0.5,
            ..Default::default()
        };
        assert!(matches!(corrupt(&ramp(16, 16), &p, 0), Err(CorruptionError::Fractions(_))));
    }

    #[test]
    fn counts_use_floor() {
        assert_eq!(block_count(0.15, 64), 9);
        assert_eq!(block_count(0.3, 10), 3);
        assert_eq!(block_count(0.0, 64), 0);
        assert_eq!(block_count(1.0, 64), 64);
    }

    #[test]
    fn record_json_round_trip() {
        let (_, rec) = corrupt(&ramp(32, 32), &CorruptionParams::default(), 11).unwrap();
        let text = serde_json::to_string(&rec).unwrap();
        assert!(text.contains("\"angle\":"));
        let back: CorruptionRecord = serde_json::from_str(&text).unwrap();
        assert_eq!(back, rec);
        assert!(serde_json::from_str::<Angle>("45").is_err());
    }

    #[test]
    fn out_of_grid_record_is_rejected() {
        let s = ramp(16, 16);
        let rec = CorruptionRecord {
            block_size: 8,
            rotated: vec![],
            masked: vec![BlockIndex { row: 2, col: 0 }],
            fill_value: 0.0,
            seed: 0,
        };
        assert!(matches!(
            invert_corruption(&s, &rec, &s),
            Err(CorruptionError::OutOfGrid { .. })
        ));
    }

    #[test]
    fn gather_map_matches_block_route() {
        let s = ramp(32, 32);
        for seed in 0..20 {
            let (c, rec) = corrupt(&s, &CorruptionParams::default(), seed).unwrap();
            let mut map = Vec::new();
            gather_map(32, 32, &rec, 0, &mut map).unwrap();
            let via_map: Vec<f32> = map
                .iter()
                .map(|&m| if m == GATHER_FILL { rec.fill_value } else { s.pixels[m as usize] })
                .collect();
            assert_eq!(via_map, c.pixels);
        }
    }
}
