//! Second-stage heads and the per-patch detection pipeline.
//!
//! The backbone, RPN scorer and head are traits so that the geometry can be
//! exercised without learned weights. A real network exported elsewhere can
//! sit behind the same traits: the backbone returns a [`FeatureMap`], the
//! scorer one objectness value and one [`BoxDelta`] per anchor, and the head
//! two class logits, a refinement delta and a square grid of mask logits.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::geometry::{clip_box, BBox, Detection, Label};
use crate::image::ImagePatch;
use crate::mask::{BinaryMask, InstanceMask};
use crate::proposal::{decode_deltas, filter_proposals, generate_anchors, nms, AnchorSpec, BoxDelta, ProposalConfig};
use crate::roialign::{roi_align, FeatureMap, RoiAlignConfig, RoiFeatures};

pub const DEFAULT_MASK_SIZE: usize = 28;

pub trait Backbone: Send + Sync {
    /// Image pixels per output cell.
    fn stride(&self) -> u32;

    /// Output is `ceil(h / stride) x ceil(w / stride)`.
    fn extract(&self, patch: &ImagePatch) -> Result<FeatureMap>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct RpnOutput {
    pub objectness: Vec<f64>,
    pub deltas: Vec<BoxDelta>,
}

pub trait RpnScorer: Send + Sync {
    fn score(&self, features: &FeatureMap, anchors: &[BBox]) -> Result<RpnOutput>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadOutputs {
    /// `[background, building]`.
    pub class_logits: [f64; 2],
    pub box_delta: BoxDelta,
    mask_size: usize,
    mask_logits: Vec<f64>,
}

impl HeadOutputs {
    pub fn new(class_logits: [f64; 2], box_delta: BoxDelta, mask_logits: Vec<f64>) -> Result<Self> {
        let mask_size = (mask_logits.len() as f64).sqrt().round() as usize;
        if mask_size == 0 || mask_size * mask_size != mask_logits.len() {
            return invalid(format!("{} mask logits do not form a square grid", mask_logits.len()));
        }
        Ok(Self {
            class_logits,
            box_delta,
            mask_size,
            mask_logits,
        })
    }

    pub fn mask_size(&self) -> usize {
        self.mask_size
    }

    pub fn mask_logits(&self) -> &[f64] {
        &self.mask_logits
    }
}

pub trait Head: Send + Sync {
    fn predict(&self, proposal: &BBox, box_features: &RoiFeatures, mask_features: &RoiFeatures) -> Result<HeadOutputs>;
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub anchors: AnchorSpec,
    pub proposal: ProposalConfig,
    pub box_roi: RoiAlignConfig,
    pub mask_roi: RoiAlignConfig,
    pub detection_score_threshold: f64,
    pub detection_nms_iou: f64,
    pub mask_binarize_threshold: f64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            anchors: AnchorSpec::default(),
            proposal: ProposalConfig::default(),
            box_roi: RoiAlignConfig::BOX_HEAD,
            mask_roi: RoiAlignConfig::MASK_HEAD,
            detection_score_threshold: 0.7,
            detection_nms_iou: 0.5,
            mask_binarize_threshold: 0.5,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        self.anchors.validate()?;
        self.proposal.validate()?;
        self.box_roi.validate()?;
        self.mask_roi.validate()?;
        for (name, v) in [
            ("detection score threshold", self.detection_score_threshold),
            ("detection nms iou", self.detection_nms_iou),
            ("mask binarize threshold", self.mask_binarize_threshold),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("{name} {v} outside [0, 1]")));
            }
        }
        Ok(())
    }
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Result<Vec<f64>> {
    if logits.is_empty() {
        return invalid("softmax of an empty logit vector");
    }
    if logits.iter().any(|l| !l.is_finite()) {
        return invalid("softmax of non-finite logits");
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / sum).collect())
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Resamples an `M x M` probability grid onto `bbox` and binarizes it into an
/// image-sized mask.
pub fn paste_mask(
    mask_probs: &[f64],
    bbox: &BBox,
    image_w: usize,
    image_h: usize,
    threshold: f64,
) -> Result<BinaryMask> {
    Ok(paste_mask_instance(mask_probs, bbox, image_w, image_h, threshold)?.to_full(image_w, image_h))
}

/// Same as [`paste_mask`] but returns only the crop covering the box.
///
/// A pixel belongs to the box when its center `(x + 0.5, y + 0.5)` lies in
/// `[x1, x2) x [y1, y2)`. Grid cell `k` of the `M` cells is centered at
/// `x1 + (k + 0.5) * width / M`; sampling clamps to the outermost cells.
/// Pixels whose interpolated probability reaches `threshold` are set.
pub fn paste_mask_instance(
    mask_probs: &[f64],
    bbox: &BBox,
    image_w: usize,
    image_h: usize,
    threshold: f64,
) -> Result<InstanceMask> {
    if bbox.area() <= 0.0 {
        return Err(Error::DegenerateBox(format!("cannot paste a mask into {bbox}")));
    }
    let m = (mask_probs.len() as f64).sqrt().round() as usize;
    if m == 0 || m * m != mask_probs.len() {
        return invalid(format!("{} mask values do not form a square grid", mask_probs.len()));
    }
    let px0 = (bbox.x1() - 0.5).ceil().max(0.0) as usize;
    let py0 = (bbox.y1() - 0.5).ceil().max(0.0) as usize;
    let px1 = ((bbox.x2() - 0.5).ceil().max(0.0) as usize).min(image_w);
    let py1 = ((bbox.y2() - 0.5).ceil().max(0.0) as usize).min(image_h);
    if px0 >= px1 || py0 >= py1 {
        return Ok(InstanceMask::empty());
    }

    let (sx, sy) = (m as f64 / bbox.width(), m as f64 / bbox.height());
    let last = (m - 1) as f64;
    let grid = |u: f64, v: f64| -> f64 {
        let (u, v) = (u.clamp(0.0, last), v.clamp(0.0, last));
        let (u0, v0) = (u.floor() as usize, v.floor() as usize);
        let (u1, v1) = ((u0 + 1).min(m - 1), (v0 + 1).min(m - 1));
        let (fu, fv) = (u - u0 as f64, v - v0 as f64);
        let p = |r: usize, c: usize| mask_probs[r * m + c];
        (1.0 - fv) * ((1.0 - fu) * p(v0, u0) + fu * p(v0, u1)) + fv * ((1.0 - fu) * p(v1, u0) + fu * p(v1, u1))
    };

    let crop = BinaryMask::from_fn(px1 - px0, py1 - py0, |x, y| {
        let cx = (px0 + x) as f64 + 0.5;
        let cy = (py0 + y) as f64 + 0.5;
        let u = (cx - bbox.x1()) * sx - 0.5;
        let v = (cy - bbox.y1()) * sy - 0.5;
        grid(u, v) >= threshold
    });
    Ok(InstanceMask::new(px0 as i64, py0 as i64, crop))
}

struct Candidate {
    bbox: BBox,
    score: f64,
    mask_probs: Vec<f64>,
}

/// Backbone, anchors, RPN, proposal filtering, RoIAlign, head, softmax,
/// score threshold, box refinement, class NMS and mask pasting, in that order.
///
/// Output is sorted by descending score; equal scores keep proposal order.
pub fn run_patch_pipeline(
    patch: &ImagePatch,
    backbone: &dyn Backbone,
    rpn: &dyn RpnScorer,
    head: &dyn Head,
    cfg: &PipelineConfig,
) -> Result<Vec<Detection>> {
    cfg.validate()?;
    let features = backbone.extract(patch)?;
    if features.stride() != cfg.anchors.stride {
        return Err(Error::Config(format!(
            "anchor stride {} does not match backbone stride {}",
            cfg.anchors.stride,
            features.stride()
        )));
    }
    let anchors = generate_anchors(features.height(), features.width(), &cfg.anchors);
    let rpn_out = rpn.score(&features, &anchors)?;
    let (w, h) = (patch.width(), patch.height());
    let proposals = filter_proposals(
        &anchors,
        &rpn_out.objectness,
        &rpn_out.deltas,
        w as f64,
        h as f64,
        &cfg.proposal,
    )?;

    let scored: Vec<Option<Candidate>> = proposals
        .par_iter()
        .map(|(proposal, _)| -> Result<Option<Candidate>> {
            let box_features = roi_align(&features, proposal, &cfg.box_roi)?;
            let mask_features = roi_align(&features, proposal, &cfg.mask_roi)?;
            let out = head.predict(proposal, &box_features, &mask_features)?;
            let probs = softmax(&out.class_logits)?;
            let score = probs[Label::Building.class_index()];
            if score < cfg.detection_score_threshold {
                return Ok(None);
            }
            let refined = clip_box(&decode_deltas(proposal, &out.box_delta)?, w as f64, h as f64);
            if refined.area() <= 0.0 {
                return Ok(None);
            }
            Ok(Some(Candidate {
                bbox: refined,
                score,
                mask_probs: out.mask_logits.iter().map(|l| sigmoid(*l)).collect(),
            }))
        })
        .collect::<Result<_>>()?;
    let candidates: Vec<Candidate> = scored.into_iter().flatten().collect();

    let boxes: Vec<BBox> = candidates.iter().map(|c| c.bbox).collect();
    let scores: Vec<f64> = candidates.iter().map(|c| c.score).collect();
    let keep = nms(&boxes, &scores, cfg.detection_nms_iou)?;

    keep.par_iter()
        .map(|&i| {
            let c = &candidates[i];
            let mask = paste_mask_instance(&c.mask_probs, &c.bbox, w, h, cfg.mask_binarize_threshold)?;
            Detection::new(c.bbox, c.score, Some(mask))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn bx(x1: f64, y1: f64, x2: f64, y2: f64) -> BBox {
        BBox::new(x1, y1, x2, y2).unwrap()
    }

    #[test]
    fn softmax_examples() {
        assert_eq!(softmax(&[0.0, 0.0]).unwrap(), vec![0.5, 0.5]);
        let p = softmax(&[1f64.ln(), 3f64.ln()]).unwrap();
        assert!((p[0] - 0.25).abs() < 1e-15 && (p[1] - 0.75).abs() < 1e-15);
        assert!(softmax(&[]).is_err());
        let big = softmax(&[1000.0, 1001.0]).unwrap();
        assert!(big.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn sigmoid_is_stable() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert!(sigmoid(-800.0) >= 0.0 && sigmoid(800.0) <= 1.0);
        assert!((sigmoid(2.0) + sigmoid(-2.0) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn paste_constant_masks() {
        let ones = vec![1.0; 28 * 28];
        let m = paste_mask(&ones, &bx(2., 2., 6., 6.), 10, 10, 0.5).unwrap();
        let expected = BinaryMask::from_fn(10, 10, |x, y| (2..6).contains(&x) && (2..6).contains(&y));
        assert_eq!(m, expected);
        let zeros = vec![0.0; 28 * 28];
        assert!(paste_mask(&zeros, &bx(2., 2., 6., 6.), 10, 10, 0.5).unwrap().is_empty());
    }

    #[test]
    fn paste_rejects_bad_input() {
        let ones = vec![1.0; 16];
        assert!(matches!(
            paste_mask(&ones, &bx(2., 2., 2., 6.), 10, 10, 0.5),
            Err(Error::DegenerateBox(_))
        ));
        assert!(paste_mask(&[1.0; 15], &bx(2., 2., 6., 6.), 10, 10, 0.5).is_err());
    }

    #[test]
    fn paste_clips_to_image() {
        let ones = vec![1.0; 4];
        let m = paste_mask(&ones, &bx(-3., 7., 4., 20.), 10, 10, 0.5).unwrap();
        assert_eq!(m.count_ones(), 4 * 3);
    }

    /// Dense oracle: evaluate the bilinear surface on a 1000x1000 lattice
    /// spanning the box and find where each row crosses the threshold.
    fn dense_boundary_column(probs: &[f64], m: usize, bbox: &BBox, thr: f64) -> f64 {
        let n = 1000;
        let mut crossings = Vec::new();
        for r in 0..n {
            let v = ((r as f64 + 0.5) / n as f64) * m as f64 - 0.5;
            let mut prev: Option<bool> = None;
            for c in 0..n {
                let u = ((c as f64 + 0.5) / n as f64) * m as f64 - 0.5;
                let (uc, vc) = (u.clamp(0.0, (m - 1) as f64), v.clamp(0.0, (m - 1) as f64));
                let (u0, v0) = (uc.floor() as usize, vc.floor() as usize);
                let (u1, v1) = ((u0 + 1).min(m - 1), (v0 + 1).min(m - 1));
                let (a, b) = (uc - u0 as f64, vc - v0 as f64);
                let val = probs[v0 * m + u0] * (1. - a) * (1. - b)
                    + probs[v0 * m + u1] * a * (1. - b)
                    + probs[v1 * m + u0] * (1. - a) * b
                    + probs[v1 * m + u1] * a * b;
                let on = val >= thr;
                if prev == Some(true) && !on {
                    crossings.push(bbox.x1() + (c as f64 / n as f64) * bbox.width());
                }
                prev = Some(on);
            }
        }
        crossings.iter().sum::<f64>() / crossings.len() as f64
    }

    #[test]
    fn left_half_mask_matches_dense_oracle() {
        let m = 28;
        let probs: Vec<f64> = (0..m * m).map(|i| if i % m < m / 2 { 1.0 } else { 0.0 }).collect();
        let bbox = bx(0., 0., 28., 28.);
        let pasted = paste_mask(&probs, &bbox, 40, 40, 0.5).unwrap();
        let oracle = dense_boundary_column(&probs, m, &bbox, 0.5);
        for y in 0..40 {
            let set: Vec<usize> = (0..40).filter(|&x| pasted.get(x, y)).collect();
            if y < 28 {
                assert_eq!(set, (0..14).collect::<Vec<_>>());
                // First unset column sits at the oracle's crossing within 1 px.
                assert!((14.0 - oracle).abs() <= 1.0, "oracle boundary {oracle}");
            } else {
                assert!(set.is_empty());
            }
        }
    }

    proptest! {
        #[test]
        fn softmax_properties(logits in proptest::collection::vec(-15.0..15.0f64, 1..8), shift in -50.0..50.0f64) {
            let p = softmax(&logits).unwrap();
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            prop_assert!(p.iter().all(|v| *v > 0.0 && *v < 1.0 || logits.len() == 1));
            let argmax = |v: &[f64]| v.iter().enumerate().fold(0, |b, (i, x)| if *x > v[b] { i } else { b });
            prop_assert_eq!(argmax(&p), argmax(&logits));
            let shifted: Vec<f64> = logits.iter().map(|l| l + shift).collect();
            let q = softmax(&shifted).unwrap();
            for (a, b) in p.iter().zip(&q) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }

        #[test]
        fn pasted_mask_stays_inside_box(x in -10.0..60.0f64, y in -10.0..60.0f64, w in 0.1..40.0f64,
                                        h in 0.1..40.0f64, seed in any::<u64>()) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let probs: Vec<f64> = (0..49).map(|_| rng.gen()).collect();
            let bbox = bx(x, y, x + w, y + h);
            let m = paste_mask(&probs, &bbox, 64, 64, 0.5).unwrap();
            let clipped = clip_box(&bbox, 64.0, 64.0);
            for yy in 0..64 {
                for xx in 0..64 {
                    if m.get(xx, yy) {
                        let (cx, cy) = (xx as f64 + 0.5, yy as f64 + 0.5);
                        prop_assert!(cx >= clipped.x1() && cx < clipped.x2() && cy >= clipped.y1() && cy < clipped.y2());
                    }
                }
            }
            prop_assert!(m.count_ones() as f64 <= w.ceil() * h.ceil());
        }

        #[test]
        fn pixel_aligned_paste_never_exceeds_area(x in 0i32..50, y in 0i32..50, w in 1i32..30, h in 1i32..30) {
            let bbox = bx(x as f64, y as f64, (x + w) as f64, (y + h) as f64);
            let m = paste_mask(&[1.0; 9], &bbox, 64, 64, 0.5).unwrap();
            prop_assert!(m.count_ones() as f64 <= bbox.area().ceil());
        }
    }
}
