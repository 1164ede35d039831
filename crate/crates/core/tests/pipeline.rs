use centerfpa::codec::HeadMaps;
use centerfpa::eval::iou;
use centerfpa::pipeline::{decode_heads, extract_tile, TileView};
use centerfpa::synth::{generate_scene, random_scene, OracleHeads, RandomSceneOptions};
use centerfpa::{
    infer_large_image, multiscale_infer, nms, split_tiles, Architecture, BBox, DetectionSet, HeadPredictor,
    ModelConfig, ModelParams, Tensor,
};
use proptest::prelude::*;

/// Reference NMS: repeatedly take the best remaining box (earliest on ties)
/// and delete every same-class box overlapping it too much.
fn reference_nms(boxes: &[BBox], thr: f64) -> Vec<BBox> {
    let mut remaining: Vec<BBox> = boxes.to_vec();
    let mut kept = Vec::new();
    while !remaining.is_empty() {
        let mut best = 0;
        for i in 1..remaining.len() {
            if remaining[i].score > remaining[best].score {
                best = i;
            }
        }
        let b = remaining.remove(best);
        remaining.retain(|o| o.class_id != b.class_id || iou(o, &b) <= thr);
        kept.push(b);
    }
    kept
}

fn random_boxes() -> impl Strategy<Value = Vec<BBox>> {
    proptest::collection::vec((0.0f64..100.0, 0.0f64..100.0, 1.0f64..40.0, 1.0f64..40.0, 0usize..3, 0u8..20), 0..100)
        .prop_map(|raw| {
            raw.into_iter()
                .map(|(x, y, w, h, c, s)| BBox { x1: x, y1: y, x2: x + w, y2: y + h, class_id: c, score: s as f64 / 19.0 })
                .collect()
        })
}

proptest! {
    #[test]
    fn nms_matches_reference_and_leaves_no_overlapping_pair(boxes in random_boxes(), thr in 0.1f64..0.9) {
        let out = nms(&DetectionSet::global(boxes.clone()), thr);
        prop_assert_eq!(&out.boxes, &reference_nms(&boxes, thr));
        for (i, a) in out.boxes.iter().enumerate() {
            for b in &out.boxes[i + 1..] {
                prop_assert!(a.class_id != b.class_id || iou(a, b) <= thr);
            }
        }
        prop_assert!(out.boxes.windows(2).all(|w| w[0].score >= w[1].score));
    }

    #[test]
    fn tiles_cover_every_pixel_with_overlapping_seams(
        w in 1usize..400, h in 1usize..400, tile in 8usize..128, frac in 0.1f64..1.0,
    ) {
        let stride = ((tile as f64 * frac) as usize).max(1);
        let frames = split_tiles(w, h, tile, stride).unwrap();
        let mut count = vec![0u32; w * h];
        for f in &frames {
            for y in f.origin_y..f.origin_y + f.content_height {
                for x in f.origin_x..f.origin_x + f.content_width {
                    count[y * w + x] += 1;
                }
            }
            prop_assert!(f.origin_x + f.content_width <= w && f.origin_y + f.content_height <= h);
        }
        prop_assert!(count.iter().all(|&c| c >= 1));
        // pixels in the overlap band of two neighbouring tiles are seen twice
        let xs: Vec<_> = frames.iter().filter(|f| f.origin_y == 0).map(|f| f.origin_x).collect();
        for pair in xs.windows(2) {
            prop_assert!(pair[1] - pair[0] <= stride);
            for x in pair[1]..pair[0] + tile {
                prop_assert!(count[x] >= 2);
            }
        }
    }
}

fn small_model(classes: usize) -> ModelParams {
    let arch = Architecture {
        widths: [4, 8, 8, 16],
        se_reduction: 4,
        fused_width: 8,
        head_width: 8,
        ..Architecture::resnet18(classes)
    };
    ModelParams::init(&arch, 2).unwrap()
}

fn cfg(classes: usize, tile: usize, stride: usize) -> ModelConfig {
    ModelConfig {
        classes: (0..classes).map(|i| format!("c{i}")).collect(),
        tile,
        stride,
        ..ModelConfig::default()
    }
}

#[test]
fn image_smaller_than_a_tile_equals_direct_tile_inference() {
    let params = small_model(3);
    let cfg = cfg(3, 64, 48);
    let image = Tensor::from_fn(&[3, 40, 50], |i| ((i * 7919) % 255) as f64 / 255.0);
    let merged = infer_large_image(&image, &params, &cfg, 1).unwrap();

    let frame = split_tiles(50, 40, 64, 48).unwrap()[0];
    let padded = extract_tile(&image, &frame).unwrap();
    let view = TileView { frame, scale_x: 1.0, scale_y: 1.0 };
    let heads = params.predict(&padded, &view).unwrap();
    let direct = nms(&DetectionSet::global(decode_heads(&heads, &cfg).unwrap().boxes), cfg.nms_iou);
    assert_eq!(merged, direct);
}

#[test]
fn object_seen_by_two_tiles_is_reported_once() {
    let gt = BBox::ground_truth(80.0, 30.0, 120.0, 60.0, 1).unwrap();
    let cfg = cfg(2, 128, 72);
    let frames = split_tiles(200, 100, 128, 72).unwrap();
    assert_eq!(frames.iter().filter(|f| f.contains_box(&gt)).count(), 2);
    let oracle = OracleHeads { ground_truth: vec![gt], num_classes: 2, stride: 4 };
    let dets = infer_large_image(&Tensor::zeros(&[3, 100, 200]), &oracle, &cfg, 1).unwrap();
    assert_eq!(dets.boxes.len(), 1);
    assert!(iou(&dets.boxes[0], &gt) > 0.999999);
}

struct Flat(f64);

impl HeadPredictor for Flat {
    fn predict(&self, tile: &Tensor, _view: &TileView) -> centerfpa::Result<HeadMaps> {
        let (_, h, w) = tile.dims3()?;
        Ok(HeadMaps {
            heatmap: Tensor::filled(&[2, h / 4, w / 4], self.0),
            wh: Tensor::filled(&[2, h / 4, w / 4], 2.0),
            offset: Tensor::zeros(&[2, h / 4, w / 4]),
        })
    }
}

#[test]
fn background_heatmaps_fall_under_the_score_floor() {
    let image = Tensor::zeros(&[3, 64, 64]);
    let mut cfg = cfg(2, 64, 48);
    assert!(infer_large_image(&image, &Flat(0.01), &cfg, 1).unwrap().boxes.is_empty());
    let loud = infer_large_image(&image, &Flat(0.2), &cfg, 1).unwrap();
    assert!(!loud.boxes.is_empty());
    assert!(loud.boxes.iter().all(|b| b.score >= cfg.score_floor));
    cfg.score_floor = 0.0;
    assert!(!infer_large_image(&image, &Flat(0.01), &cfg, 1).unwrap().boxes.is_empty());
}

fn oracle_scene(seed: u64, size: usize) -> (Tensor, Vec<BBox>) {
    let opts = RandomSceneOptions { width: size, height: size, num_classes: 4, num_objects: 10, ..Default::default() };
    let scene = generate_scene(&random_scene(&opts, seed).unwrap()).unwrap();
    (scene.image, scene.ground_truth)
}

#[test]
fn single_scale_and_duplicated_scales_agree() {
    let (image, gts) = oracle_scene(11, 400);
    let cfg = cfg(4, 256, 200);
    let oracle = OracleHeads { ground_truth: gts, num_classes: 4, stride: 4 };
    let single = infer_large_image(&image, &oracle, &cfg, 1).unwrap();
    assert_eq!(multiscale_infer(&image, &oracle, &cfg, &[1.0], 1).unwrap(), single);
    assert_eq!(multiscale_infer(&image, &oracle, &cfg, &[1.0, 1.0], 1).unwrap(), single);
    assert!(multiscale_infer(&image, &oracle, &cfg, &[], 1).is_err());
    assert!(multiscale_infer(&image, &oracle, &cfg, &[0.0], 1).is_err());
}

#[test]
fn worker_count_does_not_change_results() {
    let (image, gts) = oracle_scene(12, 500);
    let cfg = cfg(4, 128, 100);
    let oracle = OracleHeads { ground_truth: gts, num_classes: 4, stride: 4 };
    let one = multiscale_infer(&image, &oracle, &cfg, &[0.5, 1.0, 1.5], 1).unwrap();
    let four = multiscale_infer(&image, &oracle, &cfg, &[0.5, 1.0, 1.5], 4).unwrap();
    assert_eq!(one, four);

    let params = small_model(2);
    let cfg = self::cfg(2, 64, 48);
    let img = Tensor::from_fn(&[3, 100, 90], |i| ((i * 31) % 97) as f64 / 97.0);
    assert_eq!(
        infer_large_image(&img, &params, &cfg, 1).unwrap(),
        infer_large_image(&img, &params, &cfg, 3).unwrap()
    );
}

#[test]
fn tiled_inference_matches_whole_image_inference() {
    let (image, gts) = oracle_scene(13, 600);
    let oracle = OracleHeads { ground_truth: gts.clone(), num_classes: 4, stride: 4 };
    let whole = infer_large_image(&image, &oracle, &cfg(4, 600, 600), 1).unwrap();
    // an overlap of 128 px fits every object (sides <= 128) inside some tile
    let frames = split_tiles(600, 600, 256, 128).unwrap();
    assert!(gts.iter().all(|g| frames.iter().any(|f| f.contains_box(g))));
    let tiled = infer_large_image(&image, &oracle, &cfg(4, 256, 128), 1).unwrap();
    assert_eq!(whole.boxes.len(), gts.len());
    assert_eq!(tiled.boxes.len(), whole.boxes.len());
    for w in &whole.boxes {
        let best = tiled.boxes.iter().filter(|t| t.class_id == w.class_id).map(|t| iou(t, w)).fold(0.0, f64::max);
        assert!(best >= 0.99, "{w:?} best IoU {best}");
    }
}

#[test]
fn tile_extent_must_match_the_head_stride() {
    let mut cfg = cfg(2, 64, 48);
    cfg.output_stride = 8;
    let err = infer_large_image(&Tensor::zeros(&[3, 64, 64]), &Flat(0.5), &cfg, 1).unwrap_err();
    assert!(err.to_string().contains("R = 8"), "{err}");
}
