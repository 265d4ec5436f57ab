//! Binary building masks, placed instance masks, and run-length encoding.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// Per-pixel building (1) / non-building (0) raster, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    width: usize,
    height: usize,
    bits: Vec<bool>,
}

impl BinaryMask {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            bits: vec![false; width * height],
        }
    }

    pub fn from_bits(width: usize, height: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != width * height {
            return Err(Error::DimensionMismatch(format!(
                "{} bits for a {width}x{height} mask",
                bits.len()
            )));
        }
        Ok(Self { width, height, bits })
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut bits = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                bits.push(f(x, y));
            }
        }
        Self { width, height, bits }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.bits[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, value: bool) {
        self.bits[y * self.width + x] = value;
    }

    pub fn count_ones(&self) -> usize {
        self.bits.iter().filter(|b| **b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|b| *b)
    }

    pub fn same_dims(&self, other: &BinaryMask) -> bool {
        self.width == other.width && self.height == other.height
    }

    /// Tight pixel bounds `(x0, y0, x1, y1)` of the set pixels, end-exclusive.
    pub fn bounds(&self) -> Option<(usize, usize, usize, usize)> {
        let mut b: Option<(usize, usize, usize, usize)> = None;
        for y in 0..self.height {
            let row = &self.bits[y * self.width..(y + 1) * self.width];
            let Some(first) = row.iter().position(|v| *v) else {
                continue;
            };
            let last = row.iter().rposition(|v| *v).unwrap();
            b = Some(match b {
                None => (first, y, last + 1, y + 1),
                Some((x0, y0, x1, _)) => (x0.min(first), y0, x1.max(last + 1), y + 1),
            });
        }
        b
    }
}

/// A mask crop anchored at an integer pixel origin of some larger frame.
///
/// Detections carry these instead of full-frame masks so that stitching a
/// large orthophoto does not allocate one image-sized raster per instance.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InstanceMask {
    pub left: i64,
    pub top: i64,
    pub mask: BinaryMask,
}

impl InstanceMask {
    pub fn new(left: i64, top: i64, mask: BinaryMask) -> Self {
        Self { left, top, mask }
    }

    pub fn empty() -> Self {
        Self::new(0, 0, BinaryMask::new(0, 0))
    }

    /// Crops a frame-sized mask to the bounding rectangle of its set pixels.
    pub fn from_full(full: &BinaryMask) -> Self {
        match full.bounds() {
            None => Self::empty(),
            Some((x0, y0, x1, y1)) => {
                let crop = BinaryMask::from_fn(x1 - x0, y1 - y0, |x, y| full.get(x0 + x, y0 + y));
                Self::new(x0 as i64, y0 as i64, crop)
            }
        }
    }

    pub fn count_ones(&self) -> usize {
        self.mask.count_ones()
    }

    pub fn is_empty(&self) -> bool {
        self.mask.is_empty()
    }

    /// Whether the global pixel `(x, y)` is set.
    pub fn contains(&self, x: i64, y: i64) -> bool {
        let (lx, ly) = (x - self.left, y - self.top);
        lx >= 0
            && ly >= 0
            && (lx as usize) < self.mask.width()
            && (ly as usize) < self.mask.height()
            && self.mask.get(lx as usize, ly as usize)
    }

    pub fn translate(&self, dx: i64, dy: i64) -> Self {
        Self::new(self.left + dx, self.top + dy, self.mask.clone())
    }

    /// True when every set pixel lies inside a `width x height` frame.
    pub fn fits_within(&self, width: usize, height: usize) -> bool {
        self.set_pixels()
            .all(|(x, y)| x >= 0 && y >= 0 && (x as usize) < width && (y as usize) < height)
    }

    /// Global coordinates of the set pixels in row-major order.
    pub fn set_pixels(&self) -> impl Iterator<Item = (i64, i64)> + '_ {
        let w = self.mask.width();
        self.mask
            .bits()
            .iter()
            .enumerate()
            .filter(|(_, b)| **b)
            .map(move |(i, _)| (self.left + (i % w) as i64, self.top + (i / w) as i64))
    }

    /// Keeps only the pixels inside `[x0, x1) x [y0, y1)` and re-tightens the crop.
    pub fn clip_to(&self, x0: i64, y0: i64, x1: i64, y1: i64) -> Self {
        let mut pixels = self
            .set_pixels()
            .filter(|&(x, y)| x >= x0 && x < x1 && y >= y0 && y < y1)
            .peekable();
        if pixels.peek().is_none() {
            return Self::empty();
        }
        let pixels: Vec<_> = pixels.collect();
        let left = pixels.iter().map(|p| p.0).min().unwrap();
        let right = pixels.iter().map(|p| p.0).max().unwrap() + 1;
        let top = pixels[0].1;
        let bottom = pixels.last().unwrap().1 + 1;
        let mut crop = BinaryMask::new((right - left) as usize, (bottom - top) as usize);
        for (x, y) in pixels {
            crop.set((x - left) as usize, (y - top) as usize, true);
        }
        Self::new(left, top, crop)
    }

    /// Renders into a zeroed `width x height` frame; pixels outside are dropped.
    pub fn to_full(&self, width: usize, height: usize) -> BinaryMask {
        let mut full = BinaryMask::new(width, height);
        for (x, y) in self.set_pixels() {
            if x >= 0 && y >= 0 && (x as usize) < width && (y as usize) < height {
                full.set(x as usize, y as usize, true);
            }
        }
        full
    }

    /// Run-length encodes the mask as it appears inside a `width x height` frame.
    pub fn to_rle(&self, width: usize, height: usize) -> RleMask {
        let mut runs = RunBuilder::default();
        let (cw, ch) = (self.mask.width() as i64, self.mask.height() as i64);
        let (fw, fh) = (width as i64, height as i64);
        // Column span of the crop that falls inside the frame.
        let cx0 = self.left.clamp(0, fw);
        let cx1 = (self.left + cw).clamp(0, fw);
        for y in 0..fh {
            let ly = y - self.top;
            if ly < 0 || ly >= ch || cx0 >= cx1 {
                runs.push(false, width as u64);
                continue;
            }
            runs.push(false, cx0 as u64);
            for x in cx0..cx1 {
                let v = self.mask.get((x - self.left) as usize, ly as usize);
                runs.push(v, 1);
            }
            runs.push(false, (fw - cx1) as u64);
        }
        RleMask {
            width,
            height,
            runs: runs.finish(),
        }
    }

    /// Decodes a run-length mask straight into a tight crop.
    pub fn from_rle(rle: &RleMask) -> Result<Self> {
        rle.validate()?;
        let w = rle.width as u64;
        let mut spans = Vec::new();
        let mut pos = 0u64;
        for (i, &len) in rle.runs.iter().enumerate() {
            if i % 2 == 1 && len > 0 {
                spans.push((pos, pos + len));
            }
            pos += len;
        }
        if spans.is_empty() {
            return Ok(Self::empty());
        }
        let (mut x0, mut x1) = (u64::MAX, 0u64);
        for &(s, e) in &spans {
            if (e - 1) / w != s / w {
                x0 = 0;
                x1 = w;
            } else {
                x0 = x0.min(s % w);
                x1 = x1.max((e - 1) % w + 1);
            }
        }
        let y0 = spans[0].0 / w;
        let y1 = (spans.last().unwrap().1 - 1) / w + 1;
        let mut crop = BinaryMask::new((x1 - x0) as usize, (y1 - y0) as usize);
        for (s, e) in spans {
            for p in s..e {
                crop.set((p % w - x0) as usize, (p / w - y0) as usize, true);
            }
        }
        Ok(Self::new(x0 as i64, y0 as i64, crop))
    }
}

/// Alternating run lengths of 0s and 1s in row-major order, starting with a
/// (possibly empty) run of 0s.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RleMask {
    pub width: usize,
    pub height: usize,
    pub runs: Vec<u64>,
}

impl RleMask {
    pub fn validate(&self) -> Result<()> {
        let total: u64 = self.runs.iter().sum();
        let expected = (self.width * self.height) as u64;
        if total != expected {
            return Err(Error::CorruptData(format!(
                "runs sum to {total}, expected {expected} for {}x{}",
                self.width, self.height
            )));
        }
        if let Some(i) = self.runs.iter().skip(1).position(|r| *r == 0) {
            return Err(Error::CorruptData(format!("zero-length run at position {}", i + 1)));
        }
        Ok(())
    }
}

#[derive(Default)]
struct RunBuilder {
    runs: Vec<u64>,
}

impl RunBuilder {
    fn push(&mut self, value: bool, len: u64) {
        if len == 0 {
            return;
        }
        if self.runs.is_empty() {
            if value {
                self.runs.push(0);
            }
            self.runs.push(len);
            return;
        }
        let last_is_one = self.runs.len().is_multiple_of(2);
        if last_is_one == value {
            *self.runs.last_mut().unwrap() += len;
        } else {
            self.runs.push(len);
        }
    }

    fn finish(mut self) -> Vec<u64> {
        if self.runs.is_empty() {
            self.runs.push(0);
        }
        self.runs
    }
}

pub fn rle_encode(mask: &BinaryMask) -> RleMask {
    let mut runs = RunBuilder::default();
    for &b in mask.bits() {
        runs.push(b, 1);
    }
    RleMask {
        width: mask.width(),
        height: mask.height(),
        runs: runs.finish(),
    }
}

pub fn rle_decode(rle: &RleMask) -> Result<BinaryMask> {
    rle.validate()?;
    let mut bits = Vec::with_capacity(rle.width * rle.height);
    for (i, &len) in rle.runs.iter().enumerate() {
        bits.extend(std::iter::repeat_n(i % 2 == 1, len as usize));
    }
    BinaryMask::from_bits(rle.width, rle.height, bits)
}

/// Rejects crops whose pixels fall outside the frame.
pub(crate) fn check_fits(mask: &InstanceMask, width: usize, height: usize) -> Result<()> {
    if !mask.fits_within(width, height) {
        return invalid(format!(
            "instance mask at ({}, {}) sized {}x{} exceeds the {width}x{height} frame",
            mask.left,
            mask.top,
            mask.mask.width(),
            mask.mask.height()
        ));
    }
    Ok(())
}
