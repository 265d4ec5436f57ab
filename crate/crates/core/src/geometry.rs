//! Axis-aligned boxes and detections.
//!
//! Coordinates are continuous pixel positions: `(x1, y1)` is the top-left
//! corner and `(x2, y2)` the bottom-right one, with `area = (x2 - x1) * (y2 - y1)`.
//! There is no inclusive "+1" pixel convention anywhere in this crate.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::mask::InstanceMask;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 4]", into = "[f64; 4]")]
pub struct BBox {
    x1: f64,
    y1: f64,
    x2: f64,
    y2: f64,
}

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        if ![x1, y1, x2, y2].iter().all(|v| v.is_finite()) {
            return invalid(format!("non-finite box ({x1}, {y1}, {x2}, {y2})"));
        }
        if x2 < x1 || y2 < y1 {
            return invalid(format!("inverted box ({x1}, {y1}, {x2}, {y2})"));
        }
        Ok(Self { x1, y1, x2, y2 })
    }

    /// Builds a box from its center and size.
    pub fn from_center(cx: f64, cy: f64, width: f64, height: f64) -> Result<Self> {
        if !(width >= 0.0 && height >= 0.0) {
            return invalid(format!("negative box size {width}x{height}"));
        }
        Self::new(cx - 0.5 * width, cy - 0.5 * height, cx + 0.5 * width, cy + 0.5 * height)
    }

    pub fn x1(&self) -> f64 {
        self.x1
    }

    pub fn y1(&self) -> f64 {
        self.y1
    }

    pub fn x2(&self) -> f64 {
        self.x2
    }

    pub fn y2(&self) -> f64 {
        self.y2
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn center(&self) -> (f64, f64) {
        (0.5 * (self.x1 + self.x2), 0.5 * (self.y1 + self.y2))
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn coords(&self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }

    pub fn intersection_area(&self, other: &BBox) -> f64 {
        let w = (self.x2.min(other.x2) - self.x1.max(other.x1)).max(0.0);
        let h = (self.y2.min(other.y2) - self.y1.max(other.y1)).max(0.0);
        w * h
    }

    /// Shifts the box by `(dx, dy)`.
    pub fn translate(&self, dx: f64, dy: f64) -> BBox {
        BBox {
            x1: self.x1 + dx,
            y1: self.y1 + dy,
            x2: self.x2 + dx,
            y2: self.y2 + dy,
        }
    }

    /// Total order on the raw coordinates, used for deterministic tie-breaking.
    pub fn lexicographic_cmp(&self, other: &BBox) -> std::cmp::Ordering {
        self.coords()
            .iter()
            .zip(other.coords().iter())
            .map(|(a, b)| a.total_cmp(b))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
    }
}

impl TryFrom<[f64; 4]> for BBox {
    type Error = Error;

    fn try_from(c: [f64; 4]) -> Result<Self> {
        BBox::new(c[0], c[1], c[2], c[3])
    }
}

impl From<BBox> for [f64; 4] {
    fn from(b: BBox) -> Self {
        b.coords()
    }
}

impl fmt::Display for BBox {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {}, {})", self.x1, self.y1, self.x2, self.y2)
    }
}

/// Intersection over union of two boxes. Zero when the union has no area.
pub fn iou_box(a: &BBox, b: &BBox) -> f64 {
    let inter = a.intersection_area(b);
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}

/// Clamps every coordinate into `[0, width] x [0, height]`.
pub fn clip_box(b: &BBox, width: f64, height: f64) -> BBox {
    BBox {
        x1: b.x1.clamp(0.0, width),
        y1: b.y1.clamp(0.0, height),
        x2: b.x2.clamp(0.0, width),
        y2: b.y2.clamp(0.0, height),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Background,
    Building,
}

impl Label {
    /// Index of the label in the head's two-way class logits.
    pub fn class_index(self) -> usize {
        match self {
            Label::Background => 0,
            Label::Building => 1,
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Label::Background => "background",
            Label::Building => "building",
        })
    }
}

/// A detected instance. Emitted detections always carry [`Label::Building`].
#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub bbox: BBox,
    pub label: Label,
    score: f64,
    pub mask: Option<InstanceMask>,
}

impl Detection {
    pub fn new(bbox: BBox, score: f64, mask: Option<InstanceMask>) -> Result<Self> {
        Self::with_label(bbox, Label::Building, score, mask)
    }

    pub fn with_label(bbox: BBox, label: Label, score: f64, mask: Option<InstanceMask>) -> Result<Self> {
        if !(0.0..=1.0).contains(&score) {
            return invalid(format!("score {score} outside [0, 1]"));
        }
        Ok(Self {
            bbox,
            label,
            score,
            mask,
        })
    }

    pub fn score(&self) -> f64 {
        self.score
    }

    /// Moves the box and the mask placement by an integer pixel offset.
    pub fn translate(&self, dx: i64, dy: i64) -> Detection {
        Detection {
            bbox: self.bbox.translate(dx as f64, dy as f64),
            label: self.label,
            score: self.score,
            mask: self.mask.as_ref().map(|m| m.translate(dx, dy)),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn bx(x1: f64, y1: f64, x2: f64, y2: f64) -> BBox {
        BBox::new(x1, y1, x2, y2).unwrap()
    }

    /// Counts 0.01-pixel cells covered by the box inside [0, 4)^2.
    fn raster_cells(b: &BBox) -> Vec<bool> {
        let n = 400;
        let mut cells = vec![false; n * n];
        for j in 0..n {
            for i in 0..n {
                let (x, y) = ((i as f64 + 0.5) * 0.01, (j as f64 + 0.5) * 0.01);
                cells[j * n + i] = x >= b.x1() && x < b.x2() && y >= b.y1() && y < b.y2();
            }
        }
        cells
    }

    #[test]
    fn iou_examples() {
        assert_eq!(iou_box(&bx(0., 0., 10., 10.), &bx(0., 0., 10., 10.)), 1.0);
        assert_eq!(iou_box(&bx(0., 0., 1., 1.), &bx(5., 5., 6., 6.)), 0.0);
        let v = iou_box(&bx(0., 0., 2., 2.), &bx(1., 1., 3., 3.));
        assert!((v - 1.0 / 7.0).abs() < 1e-12);
    }

    #[test]
    fn iou_matches_rasterized_count() {
        let (a, b) = (bx(0., 0., 2., 2.), bx(1., 1., 3., 3.));
        let (ra, rb) = (raster_cells(&a), raster_cells(&b));
        let inter = ra.iter().zip(&rb).filter(|(p, q)| **p && **q).count();
        let union = ra.iter().zip(&rb).filter(|(p, q)| **p || **q).count();
        let raster = inter as f64 / union as f64;
        assert!((raster - 0.142857).abs() < 1e-5, "{raster}");
        assert!((iou_box(&a, &b) - raster).abs() < 1e-9);
    }

    #[test]
    fn zero_area_boxes_have_zero_iou() {
        let p = bx(3., 3., 3., 3.);
        assert_eq!(iou_box(&p, &p), 0.0);
        assert_eq!(iou_box(&p, &bx(0., 0., 10., 10.)), 0.0);
    }

    #[test]
    fn clip_examples() {
        assert_eq!(clip_box(&bx(-5., -5., 20., 20.), 10., 10.), bx(0., 0., 10., 10.));
        assert_eq!(clip_box(&bx(2., 2., 8., 8.), 10., 10.), bx(2., 2., 8., 8.));
        let out = clip_box(&bx(12., 12., 15., 15.), 10., 10.);
        assert_eq!(out, bx(10., 10., 10., 10.));
        assert_eq!(out.area(), 0.0);
    }

    #[test]
    fn constructor_rejects_bad_boxes() {
        assert!(BBox::new(2., 0., 1., 1.).is_err());
        assert!(BBox::new(0., 0., f64::NAN, 1.).is_err());
        assert!(BBox::new(0., 0., f64::INFINITY, 1.).is_err());
    }

    #[test]
    fn detection_score_range() {
        let b = bx(0., 0., 1., 1.);
        assert!(Detection::new(b, 1.2, None).is_err());
        assert!(Detection::new(b, -0.1, None).is_err());
        assert_eq!(Detection::new(b, 0.3, None).unwrap().label, Label::Building);
    }

    fn arb_box() -> impl Strategy<Value = BBox> {
        (-50.0..50.0f64, -50.0..50.0f64, 0.0..40.0f64, 0.0..40.0f64)
            .prop_map(|(x, y, w, h)| BBox::new(x, y, x + w, y + h).unwrap())
    }

    proptest! {
        #[test]
        fn iou_symmetric_and_bounded(a in arb_box(), b in arb_box()) {
            let ab = iou_box(&a, &b);
            prop_assert_eq!(ab, iou_box(&b, &a));
            prop_assert!((0.0..=1.0).contains(&ab));
            prop_assert_eq!(ab == 0.0, a.intersection_area(&b) == 0.0 || a.area() + b.area() == 0.0);
        }

        #[test]
        fn iou_reflexive(a in arb_box()) {
            prop_assume!(a.area() > 0.0);
            prop_assert_eq!(iou_box(&a, &a), 1.0);
        }

        #[test]
        fn iou_translation_invariant(a in arb_box(), b in arb_box(), tx in -100.0..100.0f64, ty in -100.0..100.0f64) {
            let shifted = iou_box(&a.translate(tx, ty), &b.translate(tx, ty));
            prop_assert!((shifted - iou_box(&a, &b)).abs() < 1e-9);
        }

        #[test]
        fn clip_idempotent(a in arb_box(), w in 1.0..60.0f64, h in 1.0..60.0f64) {
            let once = clip_box(&a, w, h);
            prop_assert_eq!(clip_box(&once, w, h), once);
            prop_assert!(once.x2() >= once.x1() && once.y2() >= once.y1());
        }
    }
}
