//! Bilinear feature sampling and fixed-size RoI feature extraction.
//!
//! Cell `(i, j)` of a feature map holds its value at continuous coordinate
//! `(x, y) = (j, i)`; there is no half-cell offset. Neighbours that fall
//! outside the grid contribute zero. RoIs are mapped into cell coordinates by
//! dividing by the map stride, with no rounding anywhere.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::geometry::BBox;

/// Minimum RoI area, in squared cells, accepted by [`roi_align`].
pub const MIN_ROI_AREA: f64 = 1e-6;

/// Channel-major (`C x H x W`) grid of features.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    height: usize,
    width: usize,
    channels: usize,
    stride: u32,
    values: Vec<f64>,
}

impl FeatureMap {
    pub fn new(height: usize, width: usize, channels: usize, stride: u32, values: Vec<f64>) -> Result<Self> {
        if values.len() != height * width * channels {
            return Err(Error::DimensionMismatch(format!(
                "{} values for a {channels}x{height}x{width} feature map",
                values.len()
            )));
        }
        if stride < 1 {
            return invalid("feature map stride must be at least 1");
        }
        if values.iter().any(|v| !v.is_finite()) {
            return invalid("feature map contains non-finite values");
        }
        Ok(Self {
            height,
            width,
            channels,
            stride,
            values,
        })
    }

    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        stride: u32,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Result<Self> {
        let mut values = Vec::with_capacity(height * width * channels);
        for c in 0..channels {
            for i in 0..height {
                for j in 0..width {
                    values.push(f(c, i, j));
                }
            }
        }
        Self::new(height, width, channels, stride, values)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn stride(&self) -> u32 {
        self.stride
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Value at row `i`, column `j` of `channel`.
    pub fn get(&self, channel: usize, i: usize, j: usize) -> f64 {
        self.values[(channel * self.height + i) * self.width + j]
    }

    pub fn channel(&self, channel: usize) -> &[f64] {
        let n = self.height * self.width;
        &self.values[channel * n..(channel + 1) * n]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoiAlignConfig {
    pub output_size: usize,
    /// Side of the regular sampling grid inside each bin.
    pub sampling_points: usize,
}

impl RoiAlignConfig {
    pub const BOX_HEAD: RoiAlignConfig = RoiAlignConfig {
        output_size: 7,
        sampling_points: 2,
    };
    pub const MASK_HEAD: RoiAlignConfig = RoiAlignConfig {
        output_size: 14,
        sampling_points: 2,
    };

    pub fn validate(&self) -> Result<()> {
        if self.output_size < 1 || self.sampling_points < 1 {
            return Err(Error::Config(format!(
                "roi output size {} and sampling points {} must be at least 1",
                self.output_size, self.sampling_points
            )));
        }
        Ok(())
    }
}

/// Smallest per-bin sampling grid (at least 2) that places `per_cell`
/// samples per feature cell along the longer bin side of `roi`.
///
/// The fixed 2x2 default under-samples bins that span more than about half a
/// cell of uncorrelated features; this gives callers a density-based choice.
pub fn sampling_points_for_density(roi: &BBox, stride: u32, output_size: usize, per_cell: f64) -> usize {
    let bin_cells = roi.width().max(roi.height()) / stride as f64 / output_size.max(1) as f64;
    ((per_cell * bin_cells).ceil() as usize).max(2)
}

impl Default for RoiAlignConfig {
    fn default() -> Self {
        Self::BOX_HEAD
    }
}

/// Pooled RoI features, channel-major `C x S x S`.
#[derive(Debug, Clone, PartialEq)]
pub struct RoiFeatures {
    pub size: usize,
    pub channels: usize,
    pub values: Vec<f64>,
}

impl RoiFeatures {
    pub fn get(&self, channel: usize, row: usize, col: usize) -> f64 {
        self.values[(channel * self.size + row) * self.size + col]
    }

    pub fn channel(&self, channel: usize) -> &[f64] {
        let n = self.size * self.size;
        &self.values[channel * n..(channel + 1) * n]
    }
}

pub fn bilinear_sample(map: &FeatureMap, x: f64, y: f64, channel: usize) -> Result<f64> {
    if channel >= map.channels {
        return invalid(format!("channel {channel} out of range for {} channels", map.channels));
    }
    if !x.is_finite() || !y.is_finite() {
        return invalid(format!("non-finite sample coordinate ({x}, {y})"));
    }
    Ok(sample_unchecked(map, x, y, channel))
}

fn sample_unchecked(map: &FeatureMap, x: f64, y: f64, channel: usize) -> f64 {
    let (x0, y0) = (x.floor(), y.floor());
    let (fx, fy) = (x - x0, y - y0);
    let plane = map.channel(channel);
    let (w, h) = (map.width as f64, map.height as f64);
    let at = |xi: f64, yi: f64| -> f64 {
        if xi < 0.0 || yi < 0.0 || xi >= w || yi >= h {
            0.0
        } else {
            plane[yi as usize * map.width + xi as usize]
        }
    };
    // Corner weights vanish when the coordinate is integral, so an exact grid
    // point returns the stored value.
    let mut v = 0.0;
    let corners = [
        (x0, y0, (1.0 - fx) * (1.0 - fy)),
        (x0 + 1.0, y0, fx * (1.0 - fy)),
        (x0, y0 + 1.0, (1.0 - fx) * fy),
        (x0 + 1.0, y0 + 1.0, fx * fy),
    ];
    for (cx, cy, wgt) in corners {
        if wgt != 0.0 {
            v += wgt * at(cx, cy);
        }
    }
    v
}

/// Pools `roi` (image pixels) into an `output_size x output_size` grid per
/// channel by averaging `sampling_points^2` bilinear samples per bin.
pub fn roi_align(map: &FeatureMap, roi: &BBox, cfg: &RoiAlignConfig) -> Result<RoiFeatures> {
    cfg.validate()?;
    let scale = 1.0 / map.stride as f64;
    let (x1, y1) = (roi.x1() * scale, roi.y1() * scale);
    let (rw, rh) = (roi.width() * scale, roi.height() * scale);
    let area = rw * rh;
    if area.is_nan() || area < MIN_ROI_AREA {
        return Err(Error::DegenerateRoi { area });
    }
    let size = cfg.output_size;
    let sp = cfg.sampling_points;
    let (bin_w, bin_h) = (rw / size as f64, rh / size as f64);
    let norm = 1.0 / (sp * sp) as f64;

    let mut values = Vec::with_capacity(map.channels * size * size);
    for c in 0..map.channels {
        for by in 0..size {
            for bx in 0..size {
                let mut acc = 0.0;
                for sy in 0..sp {
                    let y = y1 + bin_h * (by as f64 + (sy as f64 + 0.5) / sp as f64);
                    for sx in 0..sp {
                        let x = x1 + bin_w * (bx as f64 + (sx as f64 + 0.5) / sp as f64);
                        acc += sample_unchecked(map, x, y, c);
                    }
                }
                values.push(acc * norm);
            }
        }
    }
    Ok(RoiFeatures {
        size,
        channels: map.channels,
        values,
    })
}
