//! Region proposal stage: anchors, box-delta coding, objectness filtering and
//! non-maximum suppression.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::geometry::{clip_box, iou_box, BBox};

/// Upper bound on the log-scale deltas, `ln(1000)`.
pub const MAX_LOG_SCALE: f64 = 6.907_755_278_982_137;

/// Three side lengths times three aspect ratios, nine anchor shapes per cell.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnchorSpec {
    pub scales: [f64; 3],
    /// Height / width.
    pub ratios: [f64; 3],
    pub stride: u32,
}

impl Default for AnchorSpec {
    fn default() -> Self {
        Self {
            scales: [64.0, 128.0, 256.0],
            ratios: [0.5, 1.0, 2.0],
            stride: 16,
        }
    }
}

impl AnchorSpec {
    pub const SHAPES_PER_CELL: usize = 9;

    pub fn validate(&self) -> Result<()> {
        let positive = |v: &f64| v.is_finite() && *v > 0.0;
        if !self.scales.iter().all(positive) || !self.ratios.iter().all(positive) {
            return Err(Error::Config(format!(
                "anchor scales {:?} and ratios {:?} must be positive",
                self.scales, self.ratios
            )));
        }
        if self.stride < 1 {
            return Err(Error::Config("anchor stride must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct BoxDelta {
    pub tx: f64,
    pub ty: f64,
    pub tw: f64,
    pub th: f64,
}

impl BoxDelta {
    pub const ZERO: BoxDelta = BoxDelta {
        tx: 0.0,
        ty: 0.0,
        tw: 0.0,
        th: 0.0,
    };

    pub fn new(tx: f64, ty: f64, tw: f64, th: f64) -> Self {
        Self { tx, ty, tw, th }
    }

    pub fn is_finite(&self) -> bool {
        self.tx.is_finite() && self.ty.is_finite() && self.tw.is_finite() && self.th.is_finite()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProposalConfig {
    pub score_threshold: f64,
    pub pre_nms_top_k: usize,
    pub nms_iou: f64,
    pub post_nms_top_n: usize,
}

impl Default for ProposalConfig {
    fn default() -> Self {
        Self {
            score_threshold: 0.05,
            pre_nms_top_k: 6000,
            nms_iou: 0.7,
            post_nms_top_n: 300,
        }
    }
}

impl ProposalConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.score_threshold) || !(0.0..=1.0).contains(&self.nms_iou) {
            return Err(Error::Config(format!(
                "proposal thresholds must lie in [0, 1]: score {} iou {}",
                self.score_threshold, self.nms_iou
            )));
        }
        if self.pre_nms_top_k == 0 || self.post_nms_top_n == 0 {
            return Err(Error::Config("proposal counts must be at least 1".into()));
        }
        Ok(())
    }
}

/// Anchors for every feature cell.
///
/// Cell `(i, j)` is centered at `((j + 0.5) * stride, (i + 0.5) * stride)`; a
/// shape with scale `s` and ratio `r` has width `s / sqrt(r)` and height
/// `s * sqrt(r)`. Order is row-major over cells, then ratio-major and
/// scale-minor within a cell.
pub fn generate_anchors(feature_h: usize, feature_w: usize, spec: &AnchorSpec) -> Vec<BBox> {
    let stride = spec.stride as f64;
    let shapes: Vec<(f64, f64)> = spec
        .ratios
        .iter()
        .flat_map(|&r| spec.scales.iter().map(move |&s| (s / r.sqrt(), s * r.sqrt())))
        .collect();
    let mut anchors = Vec::with_capacity(feature_h * feature_w * shapes.len());
    for i in 0..feature_h {
        for j in 0..feature_w {
            let (cx, cy) = ((j as f64 + 0.5) * stride, (i as f64 + 0.5) * stride);
            for &(w, h) in &shapes {
                anchors.push(BBox::from_center(cx, cy, w, h).expect("anchor shapes are positive"));
            }
        }
    }
    anchors
}

/// Applies a delta to an anchor; log-size deltas are clamped to `ln(1000)`.
pub fn decode_deltas(anchor: &BBox, d: &BoxDelta) -> Result<BBox> {
    if !d.is_finite() {
        return invalid(format!("non-finite box delta {d:?}"));
    }
    let (xa, ya) = anchor.center();
    let (wa, ha) = (anchor.width(), anchor.height());
    let cx = xa + d.tx * wa;
    let cy = ya + d.ty * ha;
    let w = wa * d.tw.min(MAX_LOG_SCALE).exp();
    let h = ha * d.th.min(MAX_LOG_SCALE).exp();
    BBox::from_center(cx, cy, w, h)
}

pub fn encode_deltas(anchor: &BBox, target: &BBox) -> Result<BoxDelta> {
    if anchor.area() <= 0.0 || target.area() <= 0.0 {
        return invalid(format!(
            "box deltas need positive-area boxes, got anchor {anchor} target {target}"
        ));
    }
    let (xa, ya) = anchor.center();
    let (xt, yt) = target.center();
    let (wa, ha) = (anchor.width(), anchor.height());
    Ok(BoxDelta {
        tx: (xt - xa) / wa,
        ty: (yt - ya) / ha,
        tw: (target.width() / wa).ln(),
        th: (target.height() / ha).ln(),
    })
}

/// Greedy NMS. Returns kept indices in selection order; equal scores go to the
/// lower index. A box is suppressed when its IoU with a kept box exceeds
/// `iou_threshold`.
pub fn nms(boxes: &[BBox], scores: &[f64], iou_threshold: f64) -> Result<Vec<usize>> {
    if boxes.len() != scores.len() {
        return invalid(format!("{} boxes but {} scores", boxes.len(), scores.len()));
    }
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));

    let mut suppressed = vec![false; boxes.len()];
    let mut keep = Vec::new();
    for (pos, &i) in order.iter().enumerate() {
        if suppressed[i] {
            continue;
        }
        keep.push(i);
        for &j in &order[pos + 1..] {
            if !suppressed[j] && iou_box(&boxes[i], &boxes[j]) > iou_threshold {
                suppressed[j] = true;
            }
        }
    }
    Ok(keep)
}

/// Decode, clip, threshold, top-k, NMS, truncate. Output is sorted by
/// descending score.
pub fn filter_proposals(
    anchors: &[BBox],
    objectness: &[f64],
    deltas: &[BoxDelta],
    image_w: f64,
    image_h: f64,
    cfg: &ProposalConfig,
) -> Result<Vec<(BBox, f64)>> {
    if anchors.len() != objectness.len() || anchors.len() != deltas.len() {
        return invalid(format!(
            "{} anchors, {} scores, {} deltas",
            anchors.len(),
            objectness.len(),
            deltas.len()
        ));
    }
    let mut candidates = Vec::new();
    for ((anchor, &score), delta) in anchors.iter().zip(objectness).zip(deltas) {
        if score < cfg.score_threshold {
            continue;
        }
        let b = clip_box(&decode_deltas(anchor, delta)?, image_w, image_h);
        if b.area() < 1.0 {
            continue;
        }
        candidates.push((b, score));
    }
    // Stable sort keeps anchor order among equal scores.
    candidates.sort_by(|a, b| b.1.total_cmp(&a.1));
    candidates.truncate(cfg.pre_nms_top_k);

    let boxes: Vec<BBox> = candidates.iter().map(|c| c.0).collect();
    let scores: Vec<f64> = candidates.iter().map(|c| c.1).collect();
    let mut keep = nms(&boxes, &scores, cfg.nms_iou)?;
    keep.truncate(cfg.post_nms_top_n);
    Ok(keep.into_iter().map(|i| candidates[i]).collect())
}
