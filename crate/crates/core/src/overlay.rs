//! Fig.-2 style rendering: yellow translucent masks inside blue box outlines.

use crate::geometry::Detection;
use crate::image::ImagePatch;

pub const MASK_COLOR: [u8; 3] = [255, 255, 0];
pub const MASK_ALPHA: f64 = 0.45;
pub const BOX_COLOR: [u8; 3] = [0, 0, 255];
pub const BOX_THICKNESS: i64 = 2;

/// `round((1 - alpha) * src + alpha * color)` per channel.
pub fn blend(src: u8, color: u8) -> u8 {
    ((1.0 - MASK_ALPHA) * src as f64 + MASK_ALPHA * color as f64).round() as u8
}

/// Pixel rectangle `[x0, x1) x [y0, y1)` of a box, rounded to the nearest
/// pixel edges.
fn pixel_rect(d: &Detection) -> (i64, i64, i64, i64) {
    let b = &d.bbox;
    (
        b.x1().round() as i64,
        b.y1().round() as i64,
        b.x2().round() as i64,
        b.y2().round() as i64,
    )
}

/// Draws masks first, then box perimeters over them. Geometry outside the
/// image is clipped; all other pixels are copied unchanged.
pub fn render_overlay(image: &ImagePatch, detections: &[Detection]) -> ImagePatch {
    let mut out = image.clone();
    let (w, h) = (image.width() as i64, image.height() as i64);
    let inside = |x: i64, y: i64| x >= 0 && y >= 0 && x < w && y < h;
    let rgb = image.channels() >= 3;

    let mut masked = vec![false; (w * h) as usize];
    for d in detections {
        if let Some(m) = &d.mask {
            for (x, y) in m.set_pixels() {
                if inside(x, y) {
                    masked[(y * w + x) as usize] = true;
                }
            }
        }
    }
    for (i, _) in masked.iter().enumerate().filter(|(_, m)| **m) {
        let (x, y) = (i % w as usize, i / w as usize);
        let px = out.pixel_mut(x, y);
        if rgb {
            for c in 0..3 {
                px[c] = blend(px[c], MASK_COLOR[c]);
            }
        } else {
            px[0] = blend(px[0], 255);
        }
    }

    for d in detections {
        let (x0, y0, x1, y1) = pixel_rect(d);
        if x1 <= x0 || y1 <= y0 {
            continue;
        }
        for y in y0.max(0)..y1.min(h) {
            for x in x0.max(0)..x1.min(w) {
                let edge = x - x0 < BOX_THICKNESS
                    || x1 - 1 - x < BOX_THICKNESS
                    || y - y0 < BOX_THICKNESS
                    || y1 - 1 - y < BOX_THICKNESS;
                if !edge {
                    continue;
                }
                let px = out.pixel_mut(x as usize, y as usize);
                if rgb {
                    px[..3].copy_from_slice(&BOX_COLOR);
                } else {
                    px[0] = 0;
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::BBox;
    use crate::mask::{BinaryMask, InstanceMask};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn noise(w: usize, h: usize, seed: u64) -> ImagePatch {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ImagePatch::from_raw(w, h, 3, (0..w * h * 3).map(|_| rng.gen()).collect()).unwrap()
    }

    #[test]
    fn no_detections_is_identity() {
        let img = noise(20, 10, 1);
        assert_eq!(render_overlay(&img, &[]), img);
    }

    #[test]
    fn empty_mask_changes_only_the_perimeter() {
        let img = noise(20, 20, 2);
        let d = Detection::new(BBox::new(4., 5., 14., 15.).unwrap(), 0.9, Some(InstanceMask::empty())).unwrap();
        let out = render_overlay(&img, &[d]);
        for y in 0..20 {
            for x in 0..20 {
                let in_box = (4..14).contains(&x) && (5..15).contains(&y);
                let interior = (6..12).contains(&x) && (7..13).contains(&y);
                if in_box && !interior {
                    assert_eq!(out.pixel(x, y), &BOX_COLOR);
                } else {
                    assert_eq!(out.pixel(x, y), img.pixel(x, y), "({x},{y})");
                }
            }
        }
    }

    #[test]
    fn masked_pixel_is_blended() {
        let img = ImagePatch::from_raw(30, 30, 3, vec![100; 30 * 30 * 3]).unwrap();
        let mask = InstanceMask::new(10, 10, BinaryMask::from_fn(10, 10, |_, _| true));
        let d = Detection::new(BBox::new(10., 10., 20., 20.).unwrap(), 0.9, Some(mask)).unwrap();
        let out = render_overlay(&img, &[d]);
        // 0.55 * 100 + 0.45 * 255 = 169.75 -> 170; blue channel 55.
        assert_eq!(out.pixel(15, 15), &[170, 170, 55]);
        assert_eq!(out.pixel(10, 10), &BOX_COLOR);
        assert_eq!(out.pixel(25, 25), &[100, 100, 100]);
    }

    #[test]
    fn out_of_bounds_geometry_is_clipped() {
        let img = noise(10, 10, 3);
        let mask = InstanceMask::new(-5, -5, BinaryMask::from_fn(8, 8, |_, _| true));
        let d = Detection::new(BBox::new(-5., -5., 3., 3.).unwrap(), 0.5, Some(mask)).unwrap();
        let out = render_overlay(&img, &[d]);
        assert_eq!(out.pixel(9, 9), img.pixel(9, 9));
        assert_eq!(out.pixel(2, 0), &BOX_COLOR);
    }
}
