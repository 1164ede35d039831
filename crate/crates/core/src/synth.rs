//! Synthetic scenes with exact ground truth, and an oracle predictor that
//! answers with perfect head maps.
//!
//! Every random draw comes from [`SplitMix64`], so a spec regenerates the
//! same image bit for bit on any platform.

use serde::{Deserialize, Serialize};

use crate::codec::{encode_targets, BBox, HeadMaps};
use crate::error::{Error, Result};
use crate::pipeline::{HeadPredictor, TileView};
use crate::rng::SplitMix64;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pattern {
    Solid,
    Stripes,
    Checker,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub class_id: usize,
    pub cx: f64,
    pub cy: f64,
    pub width: f64,
    pub height: f64,
    /// Base RGB fill in `[0, 1]`.
    pub color: [f64; 3],
    pub pattern: Pattern,
}

impl SceneObject {
    pub fn bbox(&self) -> BBox {
        BBox {
            x1: self.cx - self.width / 2.0,
            y1: self.cy - self.height / 2.0,
            x2: self.cx + self.width / 2.0,
            y2: self.cy + self.height / 2.0,
            class_id: self.class_id,
            score: 1.0,
        }
    }
}

/// Everything needed to render a scene; serializable as JSON fixtures.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub width: usize,
    pub height: usize,
    pub num_classes: usize,
    /// Seeds the background noise.
    pub seed: u64,
    pub objects: Vec<SceneObject>,
}

impl SceneSpec {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("scene spec serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::invalid("SceneSpec", e.to_string()))
    }

    fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 || self.num_classes == 0 {
            return Err(Error::invalid(
                "generate_scene",
                format!(
                    "extents {}x{} and class count {} must be positive",
                    self.width, self.height, self.num_classes
                ),
            ));
        }
        for (index, o) in self.objects.iter().enumerate() {
            let b = o.bbox();
            let reason = if o.class_id >= self.num_classes {
                Some(format!("class {} >= {}", o.class_id, self.num_classes))
            } else if !(o.width > 0.0 && o.height > 0.0) {
                Some(format!("non-positive size {}x{}", o.width, o.height))
            } else if !(b.x1 >= 0.0 && b.y1 >= 0.0 && b.x2 <= self.width as f64 && b.y2 <= self.height as f64) {
                Some(format!(
                    "box ({}, {}, {}, {}) leaves the {}x{} image",
                    b.x1, b.y1, b.x2, b.y2, self.width, self.height
                ))
            } else {
                None
            };
            if let Some(reason) = reason {
                return Err(Error::InvalidBox { index, reason });
            }
        }
        Ok(())
    }
}

/// A rendered scene: `[3, H, W]` image with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub image: Tensor,
    pub ground_truth: Vec<BBox>,
}

fn texture(pattern: Pattern, x: usize, y: usize) -> f64 {
    match pattern {
        Pattern::Solid => 1.0,
        Pattern::Stripes => {
            if (x / 4).is_multiple_of(2) {
                1.0
            } else {
                0.6
            }
        }
        Pattern::Checker => {
            if (x / 4 + y / 4).is_multiple_of(2) {
                1.0
            } else {
                0.6
            }
        }
    }
}

/// Renders noise plus one textured rectangle per object. Later objects are
/// drawn over earlier ones; a pixel belongs to a box when its center does.
pub fn generate_scene(spec: &SceneSpec) -> Result<Scene> {
    spec.validate()?;
    let (w, h) = (spec.width, spec.height);
    let mut rng = SplitMix64::new(spec.seed);
    let mut image = Tensor::from_fn(&[3, h, w], |_| 0.1 + 0.15 * rng.next_f64());
    for o in &spec.objects {
        let b = o.bbox();
        // pixel x covers [x, x+1); its center is inside when x1 <= x + 0.5 < x2
        let xs = (b.x1 - 0.5).ceil().max(0.0) as usize..((b.x2 - 0.5).ceil().max(0.0) as usize).min(w);
        let ys = (b.y1 - 0.5).ceil().max(0.0) as usize..((b.y2 - 0.5).ceil().max(0.0) as usize).min(h);
        for (c, &base) in o.color.iter().enumerate() {
            let plane = image.channel_mut(c);
            for y in ys.clone() {
                for x in xs.clone() {
                    plane[y * w + x] = base * texture(o.pattern, x, y);
                }
            }
        }
    }
    Ok(Scene {
        image,
        ground_truth: spec.objects.iter().map(SceneObject::bbox).collect(),
    })
}

/// Parameters for [`random_scene`].
#[derive(Debug, Clone, PartialEq)]
pub struct RandomSceneOptions {
    pub width: usize,
    pub height: usize,
    pub num_classes: usize,
    pub num_objects: usize,
    /// Inclusive range of object side lengths; sides are even so integer
    /// centers give integer corners.
    pub min_side: usize,
    pub max_side: usize,
    /// Free pixels kept between any two objects.
    pub gap: usize,
}

impl Default for RandomSceneOptions {
    fn default() -> Self {
        Self {
            width: 1848,
            height: 1848,
            num_classes: 15,
            num_objects: 12,
            min_side: 24,
            max_side: 128,
            gap: 8,
        }
    }
}

/// Draws a scene of non-overlapping objects.
///
/// Placement is by rejection sampling; if the image is too crowded fewer
/// than `num_objects` objects are placed. Non-overlapping boxes of side at
/// least `2R` have distinct center cells at stride `R`.
pub fn random_scene(opts: &RandomSceneOptions, seed: u64) -> Result<SceneSpec> {
    if opts.min_side < 2 || opts.min_side > opts.max_side {
        return Err(Error::invalid(
            "random_scene",
            format!("side range {}..={} is invalid", opts.min_side, opts.max_side),
        ));
    }
    if opts.max_side > opts.width.min(opts.height) {
        return Err(Error::invalid(
            "random_scene",
            format!("max side {} exceeds the {}x{} image", opts.max_side, opts.width, opts.height),
        ));
    }
    let mut rng = SplitMix64::new(seed);
    let mut objects: Vec<SceneObject> = Vec::new();
    let half_even = |rng: &mut SplitMix64| rng.range_inclusive(opts.min_side as i64 / 2, opts.max_side as i64 / 2);
    let gap = opts.gap as f64;
    let mut attempts = 0;
    while objects.len() < opts.num_objects && attempts < 200 * opts.num_objects.max(1) {
        attempts += 1;
        let (hw, hh) = (half_even(&mut rng), half_even(&mut rng));
        let cx = rng.range_inclusive(hw, opts.width as i64 - hw) as f64;
        let cy = rng.range_inclusive(hh, opts.height as i64 - hh) as f64;
        let candidate = SceneObject {
            class_id: rng.below(opts.num_classes as u64) as usize,
            cx,
            cy,
            width: 2.0 * hw as f64,
            height: 2.0 * hh as f64,
            color: [rng.uniform(0.4, 1.0), rng.uniform(0.4, 1.0), rng.uniform(0.4, 1.0)],
            pattern: [Pattern::Solid, Pattern::Stripes, Pattern::Checker][rng.below(3) as usize],
        };
        let b = candidate.bbox();
        let clear = objects.iter().all(|o| {
            let a = o.bbox();
            a.x2 + gap <= b.x1 || b.x2 + gap <= a.x1 || a.y2 + gap <= b.y1 || b.y2 + gap <= a.y1
        });
        if clear {
            objects.push(candidate);
        }
    }
    Ok(SceneSpec {
        width: opts.width,
        height: opts.height,
        num_classes: opts.num_classes,
        seed,
        objects,
    })
}

/// Perfect head maps for a `width x height` image: the encoded targets
/// reinterpreted as network output.
pub fn oracle_heads(gts: &[BBox], width: usize, height: usize, num_classes: usize, stride: usize) -> Result<HeadMaps> {
    Ok(encode_targets(gts, width, height, num_classes, stride)?.into())
}

/// Predictor that knows the ground truth of the original image.
///
/// For each tile it rescales the ground truth to the tile's image scale and
/// encodes the boxes lying entirely inside the tile, so a tile sees exactly
/// the objects an ideal detector would report there.
#[derive(Debug, Clone)]
pub struct OracleHeads {
    pub ground_truth: Vec<BBox>,
    pub num_classes: usize,
    pub stride: usize,
}

impl HeadPredictor for OracleHeads {
    fn predict(&self, tile: &Tensor, view: &TileView) -> Result<HeadMaps> {
        let (_, h, w) = tile.dims3()?;
        let (ox, oy) = (view.frame.origin_x as f64, view.frame.origin_y as f64);
        let visible: Vec<BBox> = self
            .ground_truth
            .iter()
            .map(|b| b.scaled(view.scale_x, view.scale_y))
            .filter(|b| view.frame.contains_box(b))
            .map(|b| b.translated(-ox, -oy))
            .collect();
        oracle_heads(&visible, w, h, self.num_classes, self.stride)
    }
}
