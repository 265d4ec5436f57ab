//! Weight-free stand-ins for the learned networks.
//!
//! They are deterministic and cheap, and good enough to find bright roofs on
//! a dark background, but they are not trained models.

use crate::error::{invalid, Result};
use crate::geometry::BBox;
use crate::heads::{Backbone, Head, HeadOutputs, RpnOutput, RpnScorer, DEFAULT_MASK_SIZE};
use crate::image::ImagePatch;
use crate::proposal::BoxDelta;
use crate::roialign::{roi_align, FeatureMap, RoiAlignConfig, RoiFeatures};

pub const TOY_STRIDE: u32 = 16;

/// Channel 0 is average-pooled luminance; channels 1 and 2 are pooled
/// absolute Sobel responses along x and y, scaled into `[0, 1]`.
#[derive(Debug, Clone, Copy, Default)]
pub struct ToyBackbone;

pub const SOBEL_X: [[f64; 3]; 3] = [[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]];
pub const SOBEL_Y: [[f64; 3]; 3] = [[-1.0, -2.0, -1.0], [0.0, 0.0, 0.0], [1.0, 2.0, 1.0]];

impl ToyBackbone {
    /// Absolute stencil response at every pixel, with edge replication.
    pub fn edge_response(luma: &[f64], width: usize, height: usize, stencil: &[[f64; 3]; 3]) -> Vec<f64> {
        let mut out = vec![0.0; width * height];
        for y in 0..height {
            for x in 0..width {
                let mut acc = 0.0;
                for (dy, row) in stencil.iter().enumerate() {
                    let sy = (y + dy).saturating_sub(1).min(height - 1);
                    for (dx, k) in row.iter().enumerate() {
                        let sx = (x + dx).saturating_sub(1).min(width - 1);
                        acc += k * luma[sy * width + sx];
                    }
                }
                out[y * width + x] = acc.abs() / 4.0;
            }
        }
        out
    }
}

fn avg_pool(plane: &[f64], width: usize, height: usize, stride: usize) -> Vec<f64> {
    let (fw, fh) = (width.div_ceil(stride), height.div_ceil(stride));
    let mut out = Vec::with_capacity(fw * fh);
    for i in 0..fh {
        for j in 0..fw {
            let (y0, y1) = (i * stride, ((i + 1) * stride).min(height));
            let (x0, x1) = (j * stride, ((j + 1) * stride).min(width));
            let mut acc = 0.0;
            for y in y0..y1 {
                acc += plane[y * width + x0..y * width + x1].iter().sum::<f64>();
            }
            out.push(acc / ((y1 - y0) * (x1 - x0)) as f64);
        }
    }
    out
}

impl Backbone for ToyBackbone {
    fn stride(&self) -> u32 {
        TOY_STRIDE
    }

    fn extract(&self, patch: &ImagePatch) -> Result<FeatureMap> {
        let (w, h) = (patch.width(), patch.height());
        if w == 0 || h == 0 {
            return invalid("toy backbone needs a nonempty patch");
        }
        let mut luma = Vec::with_capacity(w * h);
        for y in 0..h {
            for x in 0..w {
                luma.push(patch.luminance(x, y));
            }
        }
        let s = TOY_STRIDE as usize;
        let mut values = avg_pool(&luma, w, h, s);
        values.extend(avg_pool(&Self::edge_response(&luma, w, h, &SOBEL_X), w, h, s));
        values.extend(avg_pool(&Self::edge_response(&luma, w, h, &SOBEL_Y), w, h, s));
        FeatureMap::new(h.div_ceil(s), w.div_ceil(s), 3, TOY_STRIDE, values)
    }
}

/// Objectness is the mean pooled luminance under the anchor; deltas are zero.
#[derive(Debug, Clone, Copy, Default)]
pub struct LuminanceRpn;

impl RpnScorer for LuminanceRpn {
    fn score(&self, features: &FeatureMap, anchors: &[BBox]) -> Result<RpnOutput> {
        let cfg = RoiAlignConfig {
            output_size: 1,
            sampling_points: 4,
        };
        let objectness = anchors
            .iter()
            .map(|a| Ok(roi_align(features, a, &cfg)?.values[0].clamp(0.0, 1.0)))
            .collect::<Result<Vec<f64>>>()?;
        Ok(RpnOutput {
            deltas: vec![BoxDelta::ZERO; anchors.len()],
            objectness,
        })
    }
}

/// Scores a proposal by how bright its pooled luminance is and uses the
/// luminance itself as the mask.
#[derive(Debug, Clone, Copy)]
pub struct LuminanceHead {
    pub gain: f64,
    pub mask_size: usize,
}

impl Default for LuminanceHead {
    fn default() -> Self {
        Self {
            gain: 12.0,
            mask_size: DEFAULT_MASK_SIZE,
        }
    }
}

impl Head for LuminanceHead {
    fn predict(
        &self,
        _proposal: &BBox,
        box_features: &RoiFeatures,
        mask_features: &RoiFeatures,
    ) -> Result<HeadOutputs> {
        let luma = box_features.channel(0);
        let mean = luma.iter().sum::<f64>() / luma.len() as f64;
        let m = self.mask_size;
        let src = mask_features.size;
        let mut mask = Vec::with_capacity(m * m);
        for r in 0..m {
            for c in 0..m {
                // Nearest source cell.
                let (sr, sc) = (r * src / m, c * src / m);
                mask.push(self.gain * (mask_features.get(0, sr, sc) - 0.5));
            }
        }
        HeadOutputs::new([0.0, self.gain * (mean - 0.5)], BoxDelta::ZERO, mask)
    }
}
