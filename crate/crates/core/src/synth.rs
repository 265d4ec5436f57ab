//! Synthetic rooftop scenes and oracle RPN/head fixtures.
//!
//! Scenes are dark backgrounds with bright, axis-aligned, pixel-aligned
//! rectangular roofs that never touch. The oracles know the planted boxes and
//! use them in place of learned weights, which lets the geometric pipeline be
//! checked end to end.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid, Result};
use crate::geometry::{iou_box, BBox};
use crate::heads::{Head, HeadOutputs, RpnOutput, RpnScorer, DEFAULT_MASK_SIZE};
use crate::image::ImagePatch;
use crate::mask::BinaryMask;
use crate::proposal::{encode_deltas, BoxDelta};
use crate::roialign::{FeatureMap, RoiFeatures};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SceneSpec {
    pub width: usize,
    pub height: usize,
    pub min_buildings: usize,
    pub max_buildings: usize,
    pub min_side: usize,
    pub max_side: usize,
    /// Minimum empty pixels between two roofs.
    pub gap: usize,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            width: 512,
            height: 512,
            min_buildings: 1,
            max_buildings: 8,
            min_side: 40,
            max_side: 120,
            gap: 16,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Scene {
    pub image: ImagePatch,
    pub buildings: Vec<BBox>,
    pub ground_truth: BinaryMask,
}

pub fn generate_scene(spec: &SceneSpec, seed: u64) -> Result<Scene> {
    if spec.min_side == 0 || spec.min_side > spec.max_side || spec.max_side > spec.width.min(spec.height) {
        return invalid(format!("unusable building sides {}..={}", spec.min_side, spec.max_side));
    }
    if spec.min_buildings > spec.max_buildings {
        return invalid("min_buildings exceeds max_buildings");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let target = rng.gen_range(spec.min_buildings..=spec.max_buildings);
    let mut rects: Vec<(usize, usize, usize, usize)> = Vec::new();
    let gap = spec.gap;
    for _ in 0..10_000 {
        if rects.len() == target {
            break;
        }
        let w = rng.gen_range(spec.min_side..=spec.max_side);
        let h = rng.gen_range(spec.min_side..=spec.max_side);
        let x = rng.gen_range(0..=spec.width - w);
        let y = rng.gen_range(0..=spec.height - h);
        let clear = rects.iter().all(|&(ox, oy, ow, oh)| {
            x >= ox + ow + gap || ox >= x + w + gap || y >= oy + oh + gap || oy >= y + h + gap
        });
        if clear {
            rects.push((x, y, w, h));
        }
    }
    if rects.len() < spec.min_buildings {
        return invalid(format!("could only place {} buildings", rects.len()));
    }

    let mut image = ImagePatch::new(spec.width, spec.height, 3);
    for y in 0..spec.height {
        for x in 0..spec.width {
            let g = rng.gen_range(20..60u8);
            image.pixel_mut(x, y).copy_from_slice(&[g, g + 5, g]);
        }
    }
    let mut ground_truth = BinaryMask::new(spec.width, spec.height);
    let mut buildings = Vec::with_capacity(rects.len());
    for &(x, y, w, h) in &rects {
        let roof = [
            rng.gen_range(200..=255u8),
            rng.gen_range(180..=255u8),
            rng.gen_range(150..=230u8),
        ];
        for yy in y..y + h {
            for xx in x..x + w {
                image.pixel_mut(xx, yy).copy_from_slice(&roof);
                ground_truth.set(xx, yy, true);
            }
        }
        buildings.push(BBox::new(x as f64, y as f64, (x + w) as f64, (y + h) as f64)?);
    }
    Ok(Scene {
        image,
        buildings,
        ground_truth,
    })
}

fn best_match(gts: &[BBox], b: &BBox) -> Option<(usize, f64)> {
    gts.iter()
        .enumerate()
        .map(|(i, g)| (i, iou_box(g, b)))
        .fold(None, |best, cur| match best {
            Some((_, v)) if v >= cur.1 => best,
            _ => Some(cur),
        })
}

/// Objectness equals the best IoU of the anchor with any planted box.
#[derive(Debug, Clone)]
pub struct OracleRpn {
    pub ground_truth: Vec<BBox>,
}

impl RpnScorer for OracleRpn {
    fn score(&self, _features: &FeatureMap, anchors: &[BBox]) -> Result<RpnOutput> {
        Ok(RpnOutput {
            objectness: anchors
                .iter()
                .map(|a| best_match(&self.ground_truth, a).map_or(0.0, |m| m.1))
                .collect(),
            deltas: vec![BoxDelta::ZERO; anchors.len()],
        })
    }
}

/// Accepts a proposal when it overlaps a planted box by at least `min_iou`,
/// regresses it exactly onto that box and predicts a full mask.
#[derive(Debug, Clone)]
pub struct OracleHead {
    pub ground_truth: Vec<BBox>,
    pub min_iou: f64,
    pub mask_size: usize,
}

impl OracleHead {
    pub fn new(ground_truth: Vec<BBox>) -> Self {
        Self {
            ground_truth,
            min_iou: 0.25,
            mask_size: DEFAULT_MASK_SIZE,
        }
    }
}

impl Head for OracleHead {
    fn predict(
        &self,
        proposal: &BBox,
        _box_features: &RoiFeatures,
        _mask_features: &RoiFeatures,
    ) -> Result<HeadOutputs> {
        let cells = self.mask_size * self.mask_size;
        match best_match(&self.ground_truth, proposal) {
            Some((i, iou)) if iou >= self.min_iou => {
                let delta = encode_deltas(proposal, &self.ground_truth[i])?;
                HeadOutputs::new([0.0, 6.0], delta, vec![10.0; cells])
            }
            _ => HeadOutputs::new([6.0, 0.0], BoxDelta::ZERO, vec![-10.0; cells]),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scenes_are_deterministic_and_separated() {
        let spec = SceneSpec::default();
        for seed in 0..10 {
            let a = generate_scene(&spec, seed).unwrap();
            let b = generate_scene(&spec, seed).unwrap();
            assert_eq!(a.image, b.image);
            assert!((1..=8).contains(&a.buildings.len()));
            let area: f64 = a.buildings.iter().map(|b| b.area()).sum();
            assert_eq!(area as usize, a.ground_truth.count_ones());
            for (i, p) in a.buildings.iter().enumerate() {
                for q in &a.buildings[i + 1..] {
                    assert_eq!(p.intersection_area(q), 0.0);
                }
            }
        }
    }

    #[test]
    fn oracle_head_snaps_to_planted_box() {
        let gt = BBox::new(100., 100., 160., 150.).unwrap();
        let head = OracleHead::new(vec![gt]);
        let dummy = RoiFeatures {
            size: 1,
            channels: 1,
            values: vec![0.0],
        };
        let near = BBox::new(96., 104., 164., 150.).unwrap();
        let out = head.predict(&near, &dummy, &dummy).unwrap();
        assert!(out.class_logits[1] > out.class_logits[0]);
        let far = BBox::new(300., 300., 340., 340.).unwrap();
        let out = head.predict(&far, &dummy, &dummy).unwrap();
        assert!(out.class_logits[0] > out.class_logits[1]);
    }
}
