//! Instance-level accuracy assessment: IoU-thresholded matching of
//! predictions to ground truth, TP/FP/FN counts and precision/recall/F1, plus
//! pixel-level confusion counts.
//!
//! Undefined ratios (zero denominators) are reported as 0.

use std::collections::VecDeque;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::geometry::{iou_box, BBox, Detection};
use crate::mask::{check_fits, BinaryMask, InstanceMask};

pub const DEFAULT_IOU_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruthInstance {
    pub bbox: BBox,
    /// Image-sized.
    pub mask: BinaryMask,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum IouKind {
    Box,
    #[default]
    Mask,
}

impl fmt::Display for IouKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            IouKind::Box => "box",
            IouKind::Mask => "mask",
        })
    }
}

impl FromStr for IouKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "box" => Ok(IouKind::Box),
            "mask" => Ok(IouKind::Mask),
            other => invalid(format!("unknown iou kind {other:?}, expected box or mask")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Counts {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl std::ops::Add for Counts {
    type Output = Counts;

    fn add(self, o: Counts) -> Counts {
        Counts {
            tp: self.tp + o.tp,
            fp: self.fp + o.fp,
            fn_: self.fn_ + o.fn_,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub iou_threshold: f64,
    pub iou_kind: IouKind,
}

impl EvalReport {
    pub fn new(counts: Counts, iou_threshold: f64, iou_kind: IouKind) -> Self {
        let (precision, recall, f1) = precision_recall_f1(counts.tp, counts.fp, counts.fn_);
        Self {
            tp: counts.tp,
            fp: counts.fp,
            fn_: counts.fn_,
            precision,
            recall,
            f1,
            iou_threshold,
            iou_kind,
        }
    }

    pub fn counts(&self) -> Counts {
        Counts {
            tp: self.tp,
            fp: self.fp,
            fn_: self.fn_,
        }
    }
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Harmonic mean of precision and recall; 0 when both are 0.
pub fn f1_score(precision: f64, recall: f64) -> f64 {
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

/// `(precision, recall, f1)` from instance counts.
pub fn precision_recall_f1(tp: u64, fp: u64, fn_: u64) -> (f64, f64, f64) {
    let p = ratio(tp, tp + fp);
    let r = ratio(tp, tp + fn_);
    (p, r, f1_score(p, r))
}

pub fn mask_iou(a: &BinaryMask, b: &BinaryMask) -> Result<f64> {
    if !a.same_dims(b) {
        return Err(Error::DimensionMismatch(format!(
            "masks {}x{} and {}x{}",
            a.width(),
            a.height(),
            b.width(),
            b.height()
        )));
    }
    let (mut inter, mut union) = (0u64, 0u64);
    for (p, q) in a.bits().iter().zip(b.bits()) {
        inter += (*p && *q) as u64;
        union += (*p || *q) as u64;
    }
    Ok(ratio(inter, union))
}

/// Mask IoU between a placed crop and an image-sized mask.
pub fn instance_mask_iou(pred: &InstanceMask, gt: &BinaryMask, gt_count: usize) -> Result<f64> {
    check_fits(pred, gt.width(), gt.height())?;
    let mut inter = 0u64;
    let mut count = 0u64;
    for (x, y) in pred.set_pixels() {
        count += 1;
        inter += gt.get(x as usize, y as usize) as u64;
    }
    Ok(ratio(inter, count + gt_count as u64 - inter))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MatchPair {
    pub prediction: usize,
    pub ground_truth: usize,
    pub iou: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatchResult {
    pub counts: Counts,
    pub pairs: Vec<MatchPair>,
}

/// Full prediction-by-ground-truth IoU table.
pub fn iou_matrix(preds: &[Detection], gts: &[GroundTruthInstance], kind: IouKind) -> Result<Vec<Vec<f64>>> {
    match kind {
        IouKind::Box => Ok(preds
            .iter()
            .map(|p| gts.iter().map(|g| iou_box(&p.bbox, &g.bbox)).collect())
            .collect()),
        IouKind::Mask => {
            if let Some(g) = gts.iter().find(|g| !g.mask.same_dims(&gts[0].mask)) {
                return Err(Error::DimensionMismatch(format!(
                    "ground-truth masks of {}x{} and {}x{}",
                    gts[0].mask.width(),
                    gts[0].mask.height(),
                    g.mask.width(),
                    g.mask.height()
                )));
            }
            let gt_counts: Vec<usize> = gts.iter().map(|g| g.mask.count_ones()).collect();
            preds
                .iter()
                .enumerate()
                .map(|(i, p)| {
                    let Some(m) = &p.mask else {
                        return invalid(format!("prediction {i} has no mask for mask-IoU matching"));
                    };
                    gts.iter()
                        .zip(&gt_counts)
                        .map(|(g, &c)| instance_mask_iou(m, &g.mask, c))
                        .collect()
                })
                .collect()
        }
    }
}

/// Greedy matching in descending score order (ties by prediction index).
/// Each prediction claims the still-unmatched ground truth with the highest
/// IoU, lowest index on ties, provided that IoU is at least `iou_threshold`.
pub fn match_detections(
    preds: &[Detection],
    gts: &[GroundTruthInstance],
    iou_threshold: f64,
    kind: IouKind,
) -> Result<MatchResult> {
    let ious = iou_matrix(preds, gts, kind)?;
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|&a, &b| preds[b].score().total_cmp(&preds[a].score()).then(a.cmp(&b)));

    let mut taken = vec![false; gts.len()];
    let mut pairs = Vec::new();
    for p in order {
        let mut best: Option<(usize, f64)> = None;
        for (g, &iou) in ious[p].iter().enumerate() {
            if taken[g] || iou < iou_threshold {
                continue;
            }
            if best.is_none_or(|(_, b)| iou > b) {
                best = Some((g, iou));
            }
        }
        if let Some((g, iou)) = best {
            taken[g] = true;
            pairs.push(MatchPair {
                prediction: p,
                ground_truth: g,
                iou,
            });
        }
    }
    let tp = pairs.len() as u64;
    Ok(MatchResult {
        counts: Counts {
            tp,
            fp: preds.len() as u64 - tp,
            fn_: gts.len() as u64 - tp,
        },
        pairs,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct PixelConfusion {
    pub tp: u64,
    pub tn: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

pub fn pixel_confusion(pred: &BinaryMask, gt: &BinaryMask) -> Result<PixelConfusion> {
    if !pred.same_dims(gt) {
        return Err(Error::DimensionMismatch(format!(
            "prediction {}x{} vs ground truth {}x{}",
            pred.width(),
            pred.height(),
            gt.width(),
            gt.height()
        )));
    }
    let mut c = PixelConfusion::default();
    for (p, g) in pred.bits().iter().zip(gt.bits()) {
        match (p, g) {
            (true, true) => c.tp += 1,
            (false, false) => c.tn += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
        }
    }
    Ok(c)
}

/// Micro-average: sums counts, then recomputes the ratios.
pub fn aggregate(reports: &[EvalReport]) -> Result<EvalReport> {
    let Some(first) = reports.first() else {
        return invalid("nothing to aggregate");
    };
    if let Some(r) = reports
        .iter()
        .find(|r| r.iou_threshold != first.iou_threshold || r.iou_kind != first.iou_kind)
    {
        return invalid(format!(
            "cannot mix iou settings {} @ {} and {} @ {}",
            first.iou_kind, first.iou_threshold, r.iou_kind, r.iou_threshold
        ));
    }
    let total = reports.iter().fold(Counts::default(), |acc, r| acc + r.counts());
    Ok(EvalReport::new(total, first.iou_threshold, first.iou_kind))
}

/// Splits a semantic building mask into 4-connected instances, ordered by
/// their first pixel in raster order.
pub fn instances_from_mask(mask: &BinaryMask) -> Vec<GroundTruthInstance> {
    let (w, h) = (mask.width(), mask.height());
    let mut seen = vec![false; w * h];
    let mut out = Vec::new();
    let mut queue = VecDeque::new();
    for start in 0..w * h {
        if seen[start] || !mask.bits()[start] {
            continue;
        }
        seen[start] = true;
        queue.push_back(start);
        let mut component = BinaryMask::new(w, h);
        let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
        while let Some(i) = queue.pop_front() {
            let (x, y) = (i % w, i / w);
            component.set(x, y, true);
            x0 = x0.min(x);
            y0 = y0.min(y);
            x1 = x1.max(x + 1);
            y1 = y1.max(y + 1);
            let mut visit = |j: usize| {
                if !seen[j] && mask.bits()[j] {
                    seen[j] = true;
                    queue.push_back(j);
                }
            };
            if x > 0 {
                visit(i - 1);
            }
            if x + 1 < w {
                visit(i + 1);
            }
            if y > 0 {
                visit(i - w);
            }
            if y + 1 < h {
                visit(i + w);
            }
        }
        out.push(GroundTruthInstance {
            bbox: BBox::new(x0 as f64, y0 as f64, x1 as f64, y1 as f64).expect("component bounds are ordered"),
            mask: component,
        });
    }
    out
}
