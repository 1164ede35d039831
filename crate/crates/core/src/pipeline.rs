//! Large-image inference: overlapping tiles, per-tile decoding, re-projection
//! into the image frame, class-wise NMS, and multi-scale pooling.

use rayon::prelude::*;

use crate::blocks::{model_forward, ModelParams};
use crate::codec::{decode_boxes, extract_peaks, BBox, Decoded, HeadMaps};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::eval::iou;
use crate::tensor::{resize_bilinear, Tensor};

/// Boxes straddling a tile edge are kept when at least this fraction of
/// their area lies inside the tile.
pub const MIN_VISIBLE_FRACTION: f64 = 0.3;

/// Placement of one tile in its source image.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TileFrame {
    pub origin_x: usize,
    pub origin_y: usize,
    /// Full tile extents; pixels beyond the image are zero.
    pub width: usize,
    pub height: usize,
    /// Extents of the part that overlaps the image.
    pub content_width: usize,
    pub content_height: usize,
}

impl TileFrame {
    pub fn contains_pixel(&self, x: usize, y: usize) -> bool {
        (self.origin_x..self.origin_x + self.content_width).contains(&x)
            && (self.origin_y..self.origin_y + self.content_height).contains(&y)
    }

    /// Whether the box lies entirely inside the image part of this tile.
    pub fn contains_box(&self, b: &BBox) -> bool {
        let (x0, y0) = (self.origin_x as f64, self.origin_y as f64);
        b.x1 >= x0
            && b.y1 >= y0
            && b.x2 <= x0 + self.content_width as f64
            && b.y2 <= y0 + self.content_height as f64
    }
}

fn axis_origins(extent: usize, tile: usize, stride: usize) -> Vec<usize> {
    if extent <= tile {
        return vec![0];
    }
    let mut origins = Vec::new();
    let mut o = 0;
    while o + tile < extent {
        origins.push(o);
        o += stride;
    }
    // last tile ends exactly at the image edge
    origins.push(extent - tile);
    origins
}

/// Tile frames covering a `width x height` image, row-major.
///
/// Origins advance by `stride`; the last origin on each axis is pulled back
/// to `extent - tile` so no tile hangs past the edge. Images smaller than a
/// tile give one tile, zero-padded on the right and bottom.
pub fn split_tiles(width: usize, height: usize, tile: usize, stride: usize) -> Result<Vec<TileFrame>> {
    if width == 0 || height == 0 {
        return Err(Error::invalid(
            "split_tiles",
            format!("image extents must be positive, got {width}x{height}"),
        ));
    }
    if stride == 0 || stride > tile {
        return Err(Error::invalid(
            "split_tiles",
            format!("stride {stride} must lie in 1..={tile}"),
        ));
    }
    let xs = axis_origins(width, tile, stride);
    let ys = axis_origins(height, tile, stride);
    Ok(ys
        .iter()
        .flat_map(|&oy| {
            xs.iter().map(move |&ox| TileFrame {
                origin_x: ox,
                origin_y: oy,
                width: tile,
                height: tile,
                content_width: tile.min(width - ox),
                content_height: tile.min(height - oy),
            })
        })
        .collect())
}

/// Copies a tile's pixels out of a `[C,H,W]` image, zero-filling padding.
pub fn extract_tile(image: &Tensor, frame: &TileFrame) -> Result<Tensor> {
    let (c, h, w) = image.dims3()?;
    if frame.origin_x + frame.content_width > w || frame.origin_y + frame.content_height > h {
        return Err(Error::invalid(
            "extract_tile",
            format!("tile {frame:?} exceeds image {w}x{h}"),
        ));
    }
    let mut out = Tensor::zeros(&[c, frame.height, frame.width]);
    for ch in 0..c {
        let src = image.channel(ch);
        let dst = out.channel_mut(ch);
        for y in 0..frame.content_height {
            let s = (frame.origin_y + y) * w + frame.origin_x;
            dst[y * frame.width..y * frame.width + frame.content_width]
                .copy_from_slice(&src[s..s + frame.content_width]);
        }
    }
    Ok(out)
}

/// Clips ground truth to a tile and moves it into tile-local coordinates.
/// Boxes keeping less than `min_visible` of their area are dropped.
pub fn clip_boxes_to_tile(boxes: &[BBox], frame: &TileFrame, min_visible: f64) -> Vec<BBox> {
    let (x0, y0) = (frame.origin_x as f64, frame.origin_y as f64);
    let (x1, y1) = (x0 + frame.content_width as f64, y0 + frame.content_height as f64);
    boxes
        .iter()
        .filter_map(|b| {
            let clipped = BBox {
                x1: b.x1.max(x0),
                y1: b.y1.max(y0),
                x2: b.x2.min(x1),
                y2: b.y2.min(y1),
                ..*b
            };
            let visible = clipped.x1 < clipped.x2
                && clipped.y1 < clipped.y2
                && clipped.area() >= min_visible * b.area();
            visible.then(|| clipped.translated(-x0, -y0))
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Frame {
    TileLocal,
    Global,
}

/// Scored boxes that all share one coordinate frame.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectionSet {
    pub boxes: Vec<BBox>,
    pub frame: Frame,
}

impl DetectionSet {
    pub fn tile_local(boxes: Vec<BBox>) -> Self {
        Self {
            boxes,
            frame: Frame::TileLocal,
        }
    }

    pub fn global(boxes: Vec<BBox>) -> Self {
        Self {
            boxes,
            frame: Frame::Global,
        }
    }
}

/// Translates tile-local detections by the tile origin.
pub fn tile_to_global(dets: DetectionSet, tile: &TileFrame) -> Result<DetectionSet> {
    if dets.frame == Frame::Global {
        return Err(Error::AlreadyGlobal);
    }
    let (dx, dy) = (tile.origin_x as f64, tile.origin_y as f64);
    Ok(DetectionSet::global(
        dets.boxes.iter().map(|b| b.translated(dx, dy)).collect(),
    ))
}

/// Greedy class-wise non-maximum suppression.
///
/// Boxes are visited by descending score (ties in input order); a box
/// survives unless a surviving box of its class overlaps it with IoU above
/// `iou_thresh`. The result is sorted by descending score.
pub fn nms(dets: &DetectionSet, iou_thresh: f64) -> DetectionSet {
    let mut order: Vec<usize> = (0..dets.boxes.len()).collect();
    order.sort_by(|&a, &b| dets.boxes[b].score.total_cmp(&dets.boxes[a].score));
    let mut kept: Vec<BBox> = Vec::new();
    for i in order {
        let cand = &dets.boxes[i];
        let suppressed = kept
            .iter()
            .any(|k| k.class_id == cand.class_id && iou(k, cand) > iou_thresh);
        if !suppressed {
            kept.push(*cand);
        }
    }
    DetectionSet {
        boxes: kept,
        frame: dets.frame,
    }
}

/// Where a tile sits, handed to predictors that need more than the pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TileView {
    pub frame: TileFrame,
    /// Resize ratio from the original image to the image being tiled.
    pub scale_x: f64,
    pub scale_y: f64,
}

/// Anything that turns a tile into head maps at the configured stride.
pub trait HeadPredictor: Sync {
    fn predict(&self, tile: &Tensor, view: &TileView) -> Result<HeadMaps>;
}

impl HeadPredictor for ModelParams {
    fn predict(&self, tile: &Tensor, _view: &TileView) -> Result<HeadMaps> {
        model_forward(tile, self)
    }
}

/// Top-K peaks above the score floor, decoded to boxes in the tile frame.
pub fn decode_heads(heads: &HeadMaps, cfg: &ModelConfig) -> Result<Decoded> {
    heads.check()?;
    let mut peaks = extract_peaks(&heads.heatmap, cfg.max_objects)?;
    peaks.retain(|p| p.score >= cfg.score_floor);
    decode_boxes(&peaks, &heads.wh, &heads.offset, cfg.output_stride)
}

fn run_tile(
    image: &Tensor,
    frame: &TileFrame,
    predictor: &dyn HeadPredictor,
    cfg: &ModelConfig,
    scale: (f64, f64),
) -> Result<DetectionSet> {
    let pixels = extract_tile(image, frame)?;
    let view = TileView {
        frame: *frame,
        scale_x: scale.0,
        scale_y: scale.1,
    };
    let heads = predictor.predict(&pixels, &view)?;
    let (_, hh, hw) = heads.heatmap.dims3()?;
    if hh * cfg.output_stride != frame.height || hw * cfg.output_stride != frame.width {
        return Err(Error::shape(
            "infer_large_image",
            format!(
                "head maps {hh}x{hw} at R = {} do not cover the {}x{} tile",
                cfg.output_stride, frame.height, frame.width
            ),
        ));
    }
    let decoded = decode_heads(&heads, cfg)?;
    tile_to_global(DetectionSet::tile_local(decoded.boxes), frame)
}

fn infer_scaled(
    image: &Tensor,
    predictor: &dyn HeadPredictor,
    cfg: &ModelConfig,
    workers: usize,
    scale: (f64, f64),
) -> Result<DetectionSet> {
    let (_, h, w) = image.dims3()?;
    let frames = split_tiles(w, h, cfg.tile, cfg.stride)?;
    let per_tile: Vec<Result<DetectionSet>> = if workers <= 1 {
        frames
            .iter()
            .map(|f| run_tile(image, f, predictor, cfg, scale))
            .collect()
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build()
            .map_err(|e| Error::invalid("infer_large_image", e.to_string()))?;
        pool.install(|| {
            frames
                .par_iter()
                .map(|f| run_tile(image, f, predictor, cfg, scale))
                .collect()
        })
    };
    let mut merged = DetectionSet::global(Vec::new());
    for tile in per_tile {
        merged.boxes.extend(tile?.boxes);
    }
    Ok(nms(&merged, cfg.nms_iou))
}

/// Tiles the image, runs the predictor on every tile, and merges the
/// re-projected detections with NMS. Output does not depend on `workers`.
pub fn infer_large_image(
    image: &Tensor,
    predictor: &dyn HeadPredictor,
    cfg: &ModelConfig,
    workers: usize,
) -> Result<DetectionSet> {
    infer_scaled(image, predictor, cfg, workers, (1.0, 1.0))
}

/// Extents of the image resized by `scale`, rounded to whole pixels.
pub fn scaled_extent(width: usize, height: usize, scale: f64) -> (usize, usize) {
    let round = |v: usize| ((v as f64 * scale).round() as usize).max(1);
    (round(width), round(height))
}

/// Runs [`infer_large_image`] on bilinearly resized copies of the image,
/// maps every box back to the original frame, and applies one final NMS.
pub fn multiscale_infer(
    image: &Tensor,
    predictor: &dyn HeadPredictor,
    cfg: &ModelConfig,
    scales: &[f64],
    workers: usize,
) -> Result<DetectionSet> {
    if scales.is_empty() || scales.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
        return Err(Error::invalid(
            "multiscale_infer",
            format!("scales must be non-empty and positive: {scales:?}"),
        ));
    }
    let (_, h, w) = image.dims3()?;
    let mut pooled = DetectionSet::global(Vec::new());
    for &s in scales {
        let (sw, sh) = scaled_extent(w, h, s);
        let (sx, sy) = (sw as f64 / w as f64, sh as f64 / h as f64);
        let dets = if (sw, sh) == (w, h) {
            infer_scaled(image, predictor, cfg, workers, (1.0, 1.0))?
        } else {
            let resized = resize_bilinear(image, sh, sw)?;
            infer_scaled(&resized, predictor, cfg, workers, (sx, sy))?
        };
        pooled
            .boxes
            .extend(dets.boxes.iter().map(|b| b.scaled(1.0 / sx, 1.0 / sy)));
    }
    Ok(nms(&pooled, cfg.nms_iou))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;

    fn b(x1: f64, y1: f64, x2: f64, y2: f64, class_id: usize, score: f64) -> BBox {
        BBox { x1, y1, x2, y2, class_id, score }
    }

    #[test]
    fn tile_grids() {
        let one = split_tiles(1024, 1024, 1024, 824).unwrap();
        assert_eq!(one.len(), 1);
        assert_eq!((one[0].origin_x, one[0].origin_y), (0, 0));

        let four = split_tiles(1848, 1848, 1024, 824).unwrap();
        let origins: Vec<_> = four.iter().map(|f| (f.origin_x, f.origin_y)).collect();
        assert_eq!(origins, vec![(0, 0), (824, 0), (0, 824), (824, 824)]);
        assert!(four.iter().all(|f| f.origin_x + f.width <= 1848));

        let small = split_tiles(300, 200, 1024, 824).unwrap();
        assert_eq!(small.len(), 1);
        assert_eq!((small[0].content_width, small[0].content_height), (300, 200));

        // 2000 = 0, 824, then clamped to 976
        let xs: Vec<_> = split_tiles(2000, 10, 1024, 824).unwrap().iter().map(|f| f.origin_x).collect();
        assert_eq!(xs, vec![0, 824, 976]);

        assert!(split_tiles(0, 5, 1024, 824).is_err());
        assert!(split_tiles(5, 5, 100, 0).is_err());
        assert!(split_tiles(5, 5, 100, 101).is_err());
    }

    #[test]
    fn tile_coverage_and_seams() {
        let mut rng = SplitMix64::new(1);
        for _ in 0..20 {
            let (w, h) = (rng.range_inclusive(1, 300) as usize, rng.range_inclusive(1, 300) as usize);
            let tile = rng.range_inclusive(16, 96) as usize;
            let stride = rng.range_inclusive(1, tile as i64) as usize;
            let frames = split_tiles(w, h, tile, stride).unwrap();
            for y in 0..h {
                for x in 0..w {
                    assert!(frames.iter().any(|f| f.contains_pixel(x, y)), "{w}x{h} t{tile} s{stride} ({x},{y})");
                }
            }
            // consecutive origins overlap by at least tile - stride
            let xs: Vec<_> = frames.iter().filter(|f| f.origin_y == 0).map(|f| f.origin_x).collect();
            for pair in xs.windows(2) {
                assert!(pair[1] - pair[0] <= stride);
            }
        }
    }

    #[test]
    fn extract_tile_pads_with_zeros() {
        let img = Tensor::from_fn(&[1, 3, 5], |i| i as f64 + 1.0);
        let f = split_tiles(5, 3, 4, 2).unwrap();
        assert_eq!(f.len(), 2);
        let t = extract_tile(&img, &f[1]).unwrap();
        assert_eq!(t.shape(), &[1, 4, 4]);
        assert_eq!(t.get(&[0, 0, 0]), img.get(&[0, 0, 1]));
        assert_eq!(t.get(&[0, 3, 0]), 0.0);
    }

    #[test]
    fn translation() {
        let frame = split_tiles(1848, 1024, 1024, 824).unwrap()[1];
        let local = DetectionSet::tile_local(vec![b(10.0, 10.0, 20.0, 20.0, 0, 0.9)]);
        let g = tile_to_global(local.clone(), &frame).unwrap();
        assert_eq!(g.boxes[0], b(834.0, 10.0, 844.0, 20.0, 0, 0.9));
        assert!(matches!(tile_to_global(g, &frame), Err(Error::AlreadyGlobal)));

        let origin = split_tiles(10, 10, 16, 8).unwrap()[0];
        assert_eq!(tile_to_global(local.clone(), &origin).unwrap().boxes, local.boxes);

        let mut rng = SplitMix64::new(2);
        for _ in 0..100 {
            let mk = |rng: &mut SplitMix64| {
                let x = rng.uniform(0.0, 50.0);
                let y = rng.uniform(0.0, 50.0);
                b(x, y, x + rng.uniform(1.0, 30.0), y + rng.uniform(1.0, 30.0), 0, 1.0)
            };
            let (p, q) = (mk(&mut rng), mk(&mut rng));
            let moved = tile_to_global(DetectionSet::tile_local(vec![p, q]), &frame).unwrap();
            // translated corners are rounded, so equality holds to rounding error
            assert!((iou(&p, &q) - iou(&moved.boxes[0], &moved.boxes[1])).abs() < 1e-12);
        }
    }

    #[test]
    fn nms_basics() {
        let one = DetectionSet::global(vec![b(0.0, 0.0, 5.0, 5.0, 0, 0.3)]);
        assert_eq!(nms(&one, 0.45), one);
        let dup = DetectionSet::global(vec![b(0.0, 0.0, 5.0, 5.0, 0, 0.8), b(0.0, 0.0, 5.0, 5.0, 0, 0.9)]);
        let out = nms(&dup, 0.45);
        assert_eq!(out.boxes, vec![b(0.0, 0.0, 5.0, 5.0, 0, 0.9)]);
        let classes = DetectionSet::global(vec![b(0.0, 0.0, 5.0, 5.0, 0, 0.8), b(0.0, 0.0, 5.0, 5.0, 1, 0.9)]);
        assert_eq!(nms(&classes, 0.45).boxes.len(), 2);
    }

    #[test]
    fn clipping_keeps_mostly_visible_boxes() {
        let frame = split_tiles(200, 100, 100, 80).unwrap()[1]; // origin 80
        let boxes = [
            b(90.0, 10.0, 110.0, 30.0, 0, 1.0),  // fully inside
            b(60.0, 10.0, 100.0, 30.0, 1, 1.0),  // half inside
            b(50.0, 10.0, 90.0, 30.0, 2, 1.0),   // quarter inside
        ];
        let kept = clip_boxes_to_tile(&boxes, &frame, MIN_VISIBLE_FRACTION);
        assert_eq!(kept.len(), 2);
        assert_eq!(kept[0], b(10.0, 10.0, 30.0, 30.0, 0, 1.0));
        assert_eq!(kept[1], b(0.0, 10.0, 20.0, 30.0, 1, 1.0));
    }

    #[test]
    fn rescaling_round_trip() {
        let mut rng = SplitMix64::new(3);
        for _ in 0..100 {
            let x = rng.uniform(0.0, 1000.0);
            let bx = b(x, x / 2.0, x + 17.3, x / 2.0 + 9.1, 0, 1.0);
            let (w, h) = (1848, 1231);
            let s = rng.uniform(0.3, 2.0);
            let (sw, sh) = scaled_extent(w, h, s);
            let (sx, sy) = (sw as f64 / w as f64, sh as f64 / h as f64);
            let back = bx.scaled(sx, sy).scaled(1.0 / sx, 1.0 / sy);
            for (u, v) in [(back.x1, bx.x1), (back.y1, bx.y1), (back.x2, bx.x2), (back.y2, bx.y2)] {
                assert!((u - v).abs() < 1e-6);
            }
        }
    }
}
