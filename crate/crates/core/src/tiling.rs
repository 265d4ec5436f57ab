//! Grid tiling of large orthophotos, train/test splitting, and recombination
//! of per-tile detections into global image coordinates.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::geometry::{BBox, Detection};
use crate::image::ImagePatch;
use crate::proposal::nms;

pub const DEFAULT_TILE_SIZE: usize = 512;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TileGrid {
    pub image_width: usize,
    pub image_height: usize,
    pub tile_size: usize,
    /// Pixels shared by neighbouring tiles; 0 gives a plain partition.
    #[serde(default)]
    pub overlap: usize,
    pub rows: usize,
    pub cols: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Tile {
    pub row: usize,
    pub col: usize,
    pub x_offset: usize,
    pub y_offset: usize,
    pub valid_width: usize,
    pub valid_height: usize,
}

impl Tile {
    /// File name for this tile under the `<stem>_r<row>_c<col>.<ext>` convention.
    pub fn file_name(&self, stem: &str, ext: &str) -> String {
        format!("{stem}_r{}_c{}.{ext}", self.row, self.col)
    }

    /// Valid (unpadded) region in global pixel coordinates.
    pub fn valid_region(&self) -> BBox {
        BBox::new(
            self.x_offset as f64,
            self.y_offset as f64,
            (self.x_offset + self.valid_width) as f64,
            (self.y_offset + self.valid_height) as f64,
        )
        .expect("tile regions are well formed")
    }
}

pub fn make_grid(image_width: usize, image_height: usize, tile_size: usize) -> Result<TileGrid> {
    make_grid_with_overlap(image_width, image_height, tile_size, 0)
}

/// Grid whose tiles start every `tile_size - overlap` pixels.
pub fn make_grid_with_overlap(
    image_width: usize,
    image_height: usize,
    tile_size: usize,
    overlap: usize,
) -> Result<TileGrid> {
    if image_width == 0 || image_height == 0 || tile_size == 0 {
        return invalid(format!(
            "grid needs positive dimensions, got {image_width}x{image_height} tile {tile_size}"
        ));
    }
    if overlap >= tile_size {
        return invalid(format!("overlap {overlap} must be smaller than tile size {tile_size}"));
    }
    let step = tile_size - overlap;
    let count = |extent: usize| 1 + extent.saturating_sub(tile_size).div_ceil(step);
    Ok(TileGrid {
        image_width,
        image_height,
        tile_size,
        overlap,
        rows: count(image_height),
        cols: count(image_width),
    })
}

impl TileGrid {
    pub fn step(&self) -> usize {
        self.tile_size - self.overlap
    }

    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn tile(&self, row: usize, col: usize) -> Result<Tile> {
        if row >= self.rows || col >= self.cols {
            return invalid(format!("tile ({row}, {col}) outside {}x{} grid", self.rows, self.cols));
        }
        let x_offset = col * self.step();
        let y_offset = row * self.step();
        Ok(Tile {
            row,
            col,
            x_offset,
            y_offset,
            valid_width: self.tile_size.min(self.image_width - x_offset),
            valid_height: self.tile_size.min(self.image_height - y_offset),
        })
    }

    /// All tiles in row-major order.
    pub fn tiles(&self) -> impl Iterator<Item = Tile> + '_ {
        (0..self.rows).flat_map(move |r| (0..self.cols).map(move |c| self.tile(r, c).unwrap()))
    }
}

/// Cuts a `tile_size x tile_size` patch; pixels beyond the source are zero.
pub fn extract_tile(image: &ImagePatch, grid: &TileGrid, row: usize, col: usize) -> Result<ImagePatch> {
    if image.width() != grid.image_width || image.height() != grid.image_height {
        return Err(Error::DimensionMismatch(format!(
            "image {}x{} does not match grid {}x{}",
            image.width(),
            image.height(),
            grid.image_width,
            grid.image_height
        )));
    }
    let tile = grid.tile(row, col)?;
    let ch = image.channels();
    let size = grid.tile_size;
    let mut out = ImagePatch::new(size, size, ch);
    for y in 0..tile.valid_height {
        let src_start = ((tile.y_offset + y) * image.width() + tile.x_offset) * ch;
        let src = &image.data()[src_start..src_start + tile.valid_width * ch];
        for (x, px) in src.chunks_exact(ch).enumerate() {
            out.pixel_mut(x, y).copy_from_slice(px);
        }
    }
    Ok(out)
}

/// Seeded shuffle followed by a cut at `round(train_fraction * n)`.
pub fn split_dataset<T: Clone>(ids: &[T], train_fraction: f64, seed: u64) -> Result<(Vec<T>, Vec<T>)> {
    if !(0.0..=1.0).contains(&train_fraction) {
        return invalid(format!("train fraction {train_fraction} outside [0, 1]"));
    }
    let mut shuffled = ids.to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    shuffled.shuffle(&mut rng);
    let n_train = (train_fraction * ids.len() as f64).round() as usize;
    let test = shuffled.split_off(n_train.min(shuffled.len()));
    Ok((shuffled, test))
}

pub fn tile_to_global(d: &Detection, tile: &Tile) -> Detection {
    d.translate(tile.x_offset as i64, tile.y_offset as i64)
}

pub fn global_to_tile(d: &Detection, tile: &Tile) -> Detection {
    d.translate(-(tile.x_offset as i64), -(tile.y_offset as i64))
}

/// Maps per-tile detections to global coordinates and suppresses duplicates
/// across tile borders with greedy NMS.
///
/// Boxes and masks are clipped to their tile's valid region; detections that
/// lie entirely in padding are dropped. Equal scores are ordered by
/// `(row, col)`, then box coordinates, then position in the tile's list, so
/// the result does not depend on the order of `per_tile`.
pub fn stitch(per_tile: &[(Tile, Vec<Detection>)], nms_iou: f64) -> Result<Vec<Detection>> {
    struct Candidate {
        det: Detection,
        tile: (usize, usize),
        index: usize,
    }

    let mut candidates = Vec::new();
    for (tile, dets) in per_tile {
        let valid = tile.valid_region();
        for (index, d) in dets.iter().enumerate() {
            let mut g = tile_to_global(d, tile);
            let clipped = BBox::new(
                g.bbox.x1().clamp(valid.x1(), valid.x2()),
                g.bbox.y1().clamp(valid.y1(), valid.y2()),
                g.bbox.x2().clamp(valid.x1(), valid.x2()),
                g.bbox.y2().clamp(valid.y1(), valid.y2()),
            )?;
            if clipped.area() <= 0.0 {
                continue;
            }
            g.bbox = clipped;
            g.mask = g.mask.map(|m| {
                m.clip_to(
                    tile.x_offset as i64,
                    tile.y_offset as i64,
                    (tile.x_offset + tile.valid_width) as i64,
                    (tile.y_offset + tile.valid_height) as i64,
                )
            });
            candidates.push(Candidate {
                det: g,
                tile: (tile.row, tile.col),
                index,
            });
        }
    }

    candidates.sort_by(|a, b| {
        b.det
            .score()
            .total_cmp(&a.det.score())
            .then(a.tile.cmp(&b.tile))
            .then_with(|| a.det.bbox.lexicographic_cmp(&b.det.bbox))
            .then(a.index.cmp(&b.index))
    });

    let boxes: Vec<BBox> = candidates.iter().map(|c| c.det.bbox).collect();
    let scores: Vec<f64> = candidates.iter().map(|c| c.det.score()).collect();
    let keep = nms(&boxes, &scores, nms_iou)?;
    let mut slots: Vec<Option<Candidate>> = candidates.into_iter().map(Some).collect();
    Ok(keep
        .into_iter()
        .map(|i| slots[i].take().expect("nms keeps each index once").det)
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mask::{BinaryMask, InstanceMask};
    use proptest::prelude::*;
    use rand::Rng;

    fn bx(x1: f64, y1: f64, x2: f64, y2: f64) -> BBox {
        BBox::new(x1, y1, x2, y2).unwrap()
    }

    #[test]
    fn grid_examples() {
        let g = make_grid(5120, 5120, 512).unwrap();
        assert_eq!((g.rows, g.cols, g.len()), (10, 10, 100));
        assert!(g.tiles().all(|t| t.valid_width == 512 && t.valid_height == 512));

        let g = make_grid(1000, 1000, 512).unwrap();
        assert_eq!((g.rows, g.cols), (2, 2));
        let t = g.tile(1, 1).unwrap();
        assert_eq!(
            (t.x_offset, t.y_offset, t.valid_width, t.valid_height),
            (512, 512, 488, 488)
        );

        assert_eq!(make_grid(512, 512, 512).unwrap().len(), 1);
        assert!(make_grid(0, 10, 512).is_err());
        assert!(make_grid(10, 10, 0).is_err());
    }

    #[test]
    fn tile_index_out_of_range() {
        let g = make_grid(1000, 600, 512).unwrap();
        assert!(g.tile(2, 0).is_err());
        let img = ImagePatch::new(1000, 600, 3);
        assert!(extract_tile(&img, &g, 0, 2).is_err());
    }

    #[test]
    fn constant_interior_tile() {
        let img = ImagePatch::from_raw(1024, 1024, 3, vec![77; 1024 * 1024 * 3]).unwrap();
        let g = make_grid(1024, 1024, 512).unwrap();
        let t = extract_tile(&img, &g, 1, 0).unwrap();
        assert!(t.data().iter().all(|v| *v == 77));
    }

    #[test]
    fn edge_tile_is_zero_padded() {
        let img = ImagePatch::from_raw(1000, 1000, 3, vec![9; 1000 * 1000 * 3]).unwrap();
        let g = make_grid(1000, 1000, 512).unwrap();
        let t = extract_tile(&img, &g, 0, 1).unwrap();
        for y in 0..512 {
            for x in 0..512 {
                let expected = if x < 488 { 9 } else { 0 };
                assert!(t.pixel(x, y).iter().all(|v| *v == expected), "({x},{y})");
            }
        }
    }

    #[test]
    fn extract_matches_source_exhaustively() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let (w, h, ts) = (rng.gen_range(1..40), rng.gen_range(1..40), rng.gen_range(1..16));
            let data: Vec<u8> = (0..w * h * 3).map(|_| rng.gen()).collect();
            let img = ImagePatch::from_raw(w, h, 3, data).unwrap();
            let g = make_grid(w, h, ts).unwrap();
            let mut covered = vec![0u32; w * h];
            for tile in g.tiles() {
                let patch = extract_tile(&img, &g, tile.row, tile.col).unwrap();
                for y in 0..ts {
                    for x in 0..ts {
                        if x < tile.valid_width && y < tile.valid_height {
                            let (gx, gy) = (tile.x_offset + x, tile.y_offset + y);
                            assert_eq!(patch.pixel(x, y), img.pixel(gx, gy));
                            covered[gy * w + gx] += 1;
                        } else {
                            assert_eq!(patch.pixel(x, y), &[0, 0, 0]);
                        }
                    }
                }
            }
            assert!(covered.iter().all(|c| *c == 1));
        }
    }

    #[test]
    fn split_examples() {
        let ids: Vec<usize> = (0..100).collect();
        let (train, test) = split_dataset(&ids, 0.8, 42).unwrap();
        assert_eq!((train.len(), test.len()), (80, 20));
        let mut all: Vec<_> = train.iter().chain(&test).copied().collect();
        all.sort();
        assert_eq!(all, ids);

        let (train, test) = split_dataset(&ids, 1.0, 1).unwrap();
        assert_eq!((train.len(), test.len()), (100, 0));

        assert_eq!(
            split_dataset(&ids, 0.8, 42).unwrap(),
            split_dataset(&ids, 0.8, 42).unwrap()
        );
        assert_ne!(
            split_dataset(&ids, 0.8, 42).unwrap().0,
            split_dataset(&ids, 0.8, 43).unwrap().0
        );
        assert!(split_dataset(&ids, 1.5, 1).is_err());
    }

    #[test]
    fn translation_examples() {
        let g = make_grid(1024, 512, 512).unwrap();
        let d = Detection::new(bx(10., 10., 20., 20.), 0.9, None).unwrap();
        let t01 = g.tile(0, 1).unwrap();
        let moved = tile_to_global(&d, &t01);
        assert_eq!(moved.bbox, bx(522., 10., 532., 20.));
        assert_eq!(moved.score(), 0.9);
        assert_eq!(tile_to_global(&d, &g.tile(0, 0).unwrap()), d);
        assert_eq!(global_to_tile(&moved, &t01), d);
    }

    #[test]
    fn stitch_single_tile_keeps_everything() {
        let g = make_grid(1024, 1024, 512).unwrap();
        let t = g.tile(1, 1).unwrap();
        let dets = vec![
            Detection::new(bx(0., 0., 10., 10.), 0.9, None).unwrap(),
            Detection::new(bx(100., 100., 150., 130.), 0.8, None).unwrap(),
        ];
        let out = stitch(&[(t, dets.clone())], 0.5).unwrap();
        assert_eq!(out.len(), 2);
        assert_eq!(out[0].bbox, bx(512., 512., 522., 522.));
        assert_eq!(out[1].bbox, dets[1].bbox.translate(512., 512.));
    }

    #[test]
    fn plain_tiles_never_overlap() {
        let g = make_grid(1024, 512, 512).unwrap();
        let (a, b) = (g.tile(0, 0).unwrap(), g.tile(0, 1).unwrap());
        assert_eq!(a.valid_region().intersection_area(&b.valid_region()), 0.0);
    }

    #[test]
    fn overlapping_grid_geometry() {
        let g = make_grid_with_overlap(1024, 512, 512, 64).unwrap();
        assert_eq!((g.rows, g.cols), (1, 3));
        let offsets: Vec<_> = g.tiles().map(|t| (t.x_offset, t.valid_width)).collect();
        assert_eq!(offsets, vec![(0, 512), (448, 512), (896, 128)]);
        assert!(make_grid_with_overlap(100, 100, 10, 10).is_err());
    }

    #[test]
    fn stitch_removes_cross_border_duplicate() {
        let g = make_grid_with_overlap(1024, 512, 512, 64).unwrap();
        let (left, right) = (g.tile(0, 0).unwrap(), g.tile(0, 1).unwrap());
        // One building inside the shared strip, seen by both tiles.
        let a = Detection::new(bx(450., 100., 500., 200.), 0.8, None).unwrap();
        let b = Detection::new(bx(2., 100., 57., 200.), 0.95, None).unwrap();
        let iou = crate::geometry::iou_box(&tile_to_global(&a, &left).bbox, &tile_to_global(&b, &right).bbox);
        assert!((iou - 50.0 / 55.0).abs() < 1e-12 && iou > 0.9);
        let out = stitch(&[(left, vec![a.clone()]), (right, vec![b.clone()])], 0.5).unwrap();
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].score(), 0.95);
        assert_eq!(out[0].bbox, bx(450., 100., 505., 200.));
        let swapped = stitch(&[(right, vec![b]), (left, vec![a])], 0.5).unwrap();
        assert_eq!(swapped, out);
    }

    #[test]
    fn stitch_drops_padding_only_detections() {
        let g = make_grid(1000, 1000, 512).unwrap();
        let t = g.tile(0, 1).unwrap();
        let in_pad = Detection::new(bx(495., 10., 510., 20.), 0.9, None).unwrap();
        let straddle = Detection::new(bx(480., 10., 500., 20.), 0.9, None).unwrap();
        let out = stitch(&[(t, vec![in_pad, straddle])], 0.5).unwrap();
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].bbox, bx(992., 10., 1000., 20.));
    }

    #[test]
    fn stitch_clips_masks_to_valid_region() {
        let g = make_grid(1000, 512, 512).unwrap();
        let t = g.tile(0, 1).unwrap();
        let mask = InstanceMask::new(480, 10, BinaryMask::from_fn(20, 10, |_, _| true));
        let d = Detection::new(bx(480., 10., 500., 20.), 0.9, Some(mask)).unwrap();
        let out = stitch(&[(t, vec![d])], 0.5).unwrap();
        let m = out[0].mask.as_ref().unwrap();
        assert_eq!(m.count_ones(), 8 * 10);
        assert!(m.fits_within(1000, 512));
    }

    fn random_scene(seed: u64) -> Vec<(Tile, Vec<Detection>)> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = make_grid_with_overlap(300, 300, 100, 30).unwrap();
        let mut out = Vec::new();
        let mut total = 0;
        for t in g.tiles() {
            let n = rng.gen_range(0..6);
            let mut dets = Vec::new();
            for _ in 0..n {
                if total >= 50 {
                    break;
                }
                total += 1;
                let (x, y) = (rng.gen_range(-20.0..90.0), rng.gen_range(-20.0..90.0));
                let (w, h) = (rng.gen_range(5.0..40.0), rng.gen_range(5.0..40.0));
                // Coarse score grid so ties actually happen.
                let score = rng.gen_range(1..10) as f64 / 10.0;
                dets.push(Detection::new(bx(x, y, x + w, y + h), score, None).unwrap());
            }
            out.push((t, dets));
        }
        out
    }

    /// Independent reference: globally map, clip, then repeatedly take the
    /// best remaining candidate and discard what it overlaps.
    fn brute_force(per_tile: &[(Tile, Vec<Detection>)], thr: f64) -> Vec<BBox> {
        let mut all: Vec<(f64, (usize, usize), BBox, usize)> = Vec::new();
        for (t, dets) in per_tile {
            for (i, d) in dets.iter().enumerate() {
                let b = d.bbox.translate(t.x_offset as f64, t.y_offset as f64);
                let v = t.valid_region();
                let c = bx(
                    b.x1().max(v.x1()).min(v.x2()),
                    b.y1().max(v.y1()).min(v.y2()),
                    b.x2().min(v.x2()).max(v.x1()),
                    b.y2().min(v.y2()).max(v.y1()),
                );
                if c.area() > 0.0 {
                    all.push((d.score(), (t.row, t.col), c, i));
                }
            }
        }
        let mut kept = Vec::new();
        while !all.is_empty() {
            let mut best = 0;
            for k in 1..all.len() {
                let (a, b) = (&all[k], &all[best]);
                let better = a.0 > b.0
                    || (a.0 == b.0
                        && (a.1, a.2.coords().map(f64::to_bits), a.3) < (b.1, b.2.coords().map(f64::to_bits), b.3));
                if better {
                    best = k;
                }
            }
            let chosen = all.remove(best);
            all.retain(|c| crate::geometry::iou_box(&c.2, &chosen.2) <= thr);
            kept.push(chosen.2);
        }
        kept
    }

    #[test]
    fn stitch_matches_brute_force() {
        for seed in 0..40 {
            let scene = random_scene(seed);
            let got: Vec<BBox> = stitch(&scene, 0.5).unwrap().iter().map(|d| d.bbox).collect();
            assert_eq!(got, brute_force(&scene, 0.5), "seed {seed}");
        }
    }

    proptest! {
        #[test]
        fn split_sizes_add_up(n in 0usize..300, f in 0.0..=1.0f64, seed in any::<u64>()) {
            let ids: Vec<usize> = (0..n).collect();
            let (train, test) = split_dataset(&ids, f, seed).unwrap();
            prop_assert_eq!(train.len() + test.len(), n);
            prop_assert_eq!(train.len(), (f * n as f64).round() as usize);
        }

        #[test]
        fn overlapping_grid_covers_image(w in 1usize..1500, h in 1usize..1500, ts in 2usize..400, ov in 0usize..200) {
            prop_assume!(ov < ts);
            let g = make_grid_with_overlap(w, h, ts, ov).unwrap();
            let last = g.tile(g.rows - 1, g.cols - 1).unwrap();
            prop_assert_eq!(last.x_offset + last.valid_width, w);
            prop_assert_eq!(last.y_offset + last.valid_height, h);
            prop_assert!(g.tiles().all(|t| t.valid_width > 0 && t.valid_height > 0));
        }

        #[test]
        fn grid_covers_image_once(w in 1usize..2000, h in 1usize..2000, ts in 1usize..600) {
            let g = make_grid(w, h, ts).unwrap();
            let area: usize = g.tiles().map(|t| t.valid_width * t.valid_height).sum();
            prop_assert_eq!(area, w * h);
            prop_assert!(g.tiles().all(|t| t.valid_width > 0 && t.valid_height > 0
                && t.valid_width <= ts && t.valid_height <= ts));
        }

        #[test]
        fn stitch_is_tile_order_invariant(seed in 0u64..1000, rot in 0usize..9) {
            let scene = random_scene(seed);
            let mut permuted = scene.clone();
            permuted.rotate_left(rot);
            permuted.reverse();
            prop_assert_eq!(stitch(&scene, 0.5).unwrap(), stitch(&permuted, 0.5).unwrap());
        }

        #[test]
        fn translation_roundtrip(x in -400i32..400, y in -400i32..400, w in 0i32..400, h in 0i32..400,
                                 row in 0usize..10, col in 0usize..10) {
            let g = make_grid(5120, 5120, 512).unwrap();
            let t = g.tile(row, col).unwrap();
            let b = bx(x as f64 / 4.0, y as f64 / 4.0, (x + w) as f64 / 4.0, (y + h) as f64 / 4.0);
            let d = Detection::new(b, 0.5, None).unwrap();
            prop_assert_eq!(global_to_tile(&tile_to_global(&d, &t), &t), d);
        }
    }
}
