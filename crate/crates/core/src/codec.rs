//! Ground-truth target encoding and the matching peak decoder.
//!
//! A box with center `p` lands on the head-map cell `q = floor(p / R)`. The
//! heatmap channel of its class holds a separable Gaussian that is exactly 1
//! at `q`; the size map holds the box extent divided by `R`; the offset map
//! holds the fractional part `p / R - q`. Decoding reads the same three maps
//! back at every heatmap peak, so encode followed by decode is the identity
//! on boxes whose `q` cells are distinct.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{maxpool2d, Tensor};

/// Axis-aligned box in pixel coordinates with a class and a confidence.
/// Ground truth carries score 1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
    pub class_id: usize,
    pub score: f64,
}

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64, class_id: usize, score: f64) -> Result<Self> {
        let b = Self {
            x1,
            y1,
            x2,
            y2,
            class_id,
            score,
        };
        b.check().map_err(|reason| Error::InvalidBox { index: 0, reason })?;
        Ok(b)
    }

    pub fn ground_truth(x1: f64, y1: f64, x2: f64, y2: f64, class_id: usize) -> Result<Self> {
        Self::new(x1, y1, x2, y2, class_id, 1.0)
    }

    fn check(&self) -> std::result::Result<(), String> {
        let coords = [self.x1, self.y1, self.x2, self.y2];
        if coords.iter().any(|v| !v.is_finite()) {
            return Err(format!("non-finite coordinates {coords:?}"));
        }
        if !(self.x1 < self.x2 && self.y1 < self.y2) {
            return Err(format!("degenerate box {coords:?}"));
        }
        if !(0.0..=1.0).contains(&self.score) {
            return Err(format!("score {} outside [0, 1]", self.score));
        }
        Ok(())
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x1 + self.x2) / 2.0, (self.y1 + self.y2) / 2.0)
    }

    pub fn translated(&self, dx: f64, dy: f64) -> Self {
        Self {
            x1: self.x1 + dx,
            y1: self.y1 + dy,
            x2: self.x2 + dx,
            y2: self.y2 + dy,
            ..*self
        }
    }

    pub fn scaled(&self, sx: f64, sy: f64) -> Self {
        Self {
            x1: self.x1 * sx,
            y1: self.y1 * sy,
            x2: self.x2 * sx,
            y2: self.y2 * sy,
            ..*self
        }
    }
}

/// Center of a box in pixels, its head-map cell, and the fractional remainder.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CenterPoint {
    pub center: (f64, f64),
    pub cell: (i64, i64),
    pub frac: (f64, f64),
}

pub fn center_point(b: &BBox, stride: usize) -> CenterPoint {
    let r = stride as f64;
    let (px, py) = b.center();
    let (sx, sy) = (px / r, py / r);
    let (qx, qy) = (sx.floor(), sy.floor());
    CenterPoint {
        center: (px, py),
        cell: (qx as i64, qy as i64),
        frac: (sx - qx, sy - qy),
    }
}

/// Gaussian spreads for an object of the given downsampled extent, chosen so
/// that three standard deviations reach half the extent.
pub fn gaussian_sigmas(w_ds: f64, h_ds: f64) -> Result<(f64, f64)> {
    if !(w_ds > 0.0 && h_ds > 0.0) || !w_ds.is_finite() || !h_ds.is_finite() {
        return Err(Error::invalid(
            "gaussian_sigmas",
            format!("object extent must be positive, got {w_ds} x {h_ds}"),
        ));
    }
    Ok((w_ds / 6.0, h_ds / 6.0))
}

/// Value of the separable Gaussian at offset `(dx, dy)` cells from its peak.
pub fn gaussian_value(dx: f64, dy: f64, (s1, s2): (f64, f64)) -> f64 {
    (-(dx * dx) / (2.0 * s1 * s1)).exp() * (-(dy * dy) / (2.0 * s2 * s2)).exp()
}

/// Encoded training targets for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct Targets {
    /// `[C, H/R, W/R]`, values in `[0, 1]`.
    pub heatmap: Tensor,
    /// `[2, H/R, W/R]`: downsampled width then height at each center cell.
    pub wh: Tensor,
    /// `[2, H/R, W/R]`: fractional x then y offset at each center cell.
    pub offset: Tensor,
    /// `[H/R, W/R]`, 1 at center cells.
    pub pos_mask: Tensor,
    pub num_objects: usize,
    /// Boxes whose center cell was already taken; the later box wins.
    pub collisions: usize,
}

/// Raw network (or oracle) outputs consumed by the decoder.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadMaps {
    pub heatmap: Tensor,
    pub wh: Tensor,
    pub offset: Tensor,
}

impl HeadMaps {
    pub fn check(&self) -> Result<()> {
        let (_, h, w) = self.heatmap.dims3()?;
        for (name, t) in [("wh", &self.wh), ("offset", &self.offset)] {
            if t.shape() != [2, h, w] {
                return Err(Error::shape(
                    "HeadMaps",
                    format!(
                        "{name} map {:?} does not match heatmap {:?}",
                        t.shape(),
                        self.heatmap.shape()
                    ),
                ));
            }
        }
        Ok(())
    }
}

impl From<Targets> for HeadMaps {
    fn from(t: Targets) -> Self {
        Self {
            heatmap: t.heatmap,
            wh: t.wh,
            offset: t.offset,
        }
    }
}

/// Encodes ground-truth boxes for a `width x height` image into head-map
/// targets at output stride `stride`.
///
/// Each box splats a Gaussian (truncated at three standard deviations per
/// axis) onto its class channel; overlapping Gaussians combine by maximum.
pub fn encode_targets(
    boxes: &[BBox],
    width: usize,
    height: usize,
    num_classes: usize,
    stride: usize,
) -> Result<Targets> {
    if stride == 0 || num_classes == 0 {
        return Err(Error::invalid(
            "encode_targets",
            "stride and class count must be positive",
        ));
    }
    if width == 0 || height == 0 || !width.is_multiple_of(stride) || !height.is_multiple_of(stride) {
        return Err(Error::invalid(
            "encode_targets",
            format!("image {width}x{height} must be a positive multiple of R = {stride}"),
        ));
    }
    let (h, w) = (height / stride, width / stride);
    let r = stride as f64;
    let mut heatmap = Tensor::zeros(&[num_classes, h, w]);
    let mut wh = Tensor::zeros(&[2, h, w]);
    let mut offset = Tensor::zeros(&[2, h, w]);
    let mut pos_mask = Tensor::zeros(&[h, w]);
    let mut collisions = 0;

    for (index, b) in boxes.iter().enumerate() {
        let reject = |reason: String| Error::InvalidBox { index, reason };
        b.check().map_err(reject)?;
        if b.x1 < 0.0 || b.y1 < 0.0 || b.x2 > width as f64 || b.y2 > height as f64 {
            return Err(reject(format!(
                "({}, {}, {}, {}) lies outside the {width}x{height} image",
                b.x1, b.y1, b.x2, b.y2
            )));
        }
        if b.class_id >= num_classes {
            return Err(reject(format!(
                "class {} out of range for {num_classes} classes",
                b.class_id
            )));
        }

        let cp = center_point(b, stride);
        let (qx, qy) = (cp.cell.0 as usize, cp.cell.1 as usize);
        let (w_ds, h_ds) = (b.width() / r, b.height() / r);
        let sigmas = gaussian_sigmas(w_ds, h_ds).map_err(|e| reject(e.to_string()))?;

        let rx = (3.0 * sigmas.0).floor() as usize;
        let ry = (3.0 * sigmas.1).floor() as usize;
        let xs = qx.saturating_sub(rx)..=(qx + rx).min(w - 1);
        let ys = qy.saturating_sub(ry)..=(qy + ry).min(h - 1);
        let gx: Vec<f64> = xs
            .clone()
            .map(|x| gaussian_value(x as f64 - qx as f64, 0.0, sigmas))
            .collect();
        let plane = heatmap.channel_mut(b.class_id);
        for y in ys {
            let gy = gaussian_value(0.0, y as f64 - qy as f64, sigmas);
            for (x, g) in xs.clone().zip(&gx) {
                let cell = &mut plane[y * w + x];
                *cell = cell.max(g * gy);
            }
        }

        if pos_mask.get(&[qy, qx]) != 0.0 {
            collisions += 1;
        }
        pos_mask.set(&[qy, qx], 1.0);
        wh.set(&[0, qy, qx], w_ds);
        wh.set(&[1, qy, qx], h_ds);
        offset.set(&[0, qy, qx], cp.frac.0);
        offset.set(&[1, qy, qx], cp.frac.1);
    }

    Ok(Targets {
        heatmap,
        wh,
        offset,
        pos_mask,
        num_objects: boxes.len(),
        collisions,
    })
}

/// A heatmap cell that equals the maximum of its 3x3 neighborhood.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Peak {
    pub x: usize,
    pub y: usize,
    pub class_id: usize,
    pub score: f64,
}

/// Returns the `k` highest hot spots of a `[C,h,w]` heatmap, best first.
///
/// A cell is a hot spot when it equals the 3x3 max-pooled value at its
/// position (borders padded with negative infinity), so plateaus yield
/// several peaks. Equal scores are ordered by channel, row, then column.
pub fn extract_peaks(heatmap: &Tensor, k: usize) -> Result<Vec<Peak>> {
    if k == 0 {
        return Err(Error::invalid("extract_peaks", "K must be at least 1"));
    }
    let (c, h, w) = heatmap.dims3()?;
    let pooled = maxpool2d(heatmap, 3, 1, 1)?;
    let mut peaks: Vec<Peak> = Vec::new();
    for ch in 0..c {
        let values = heatmap.channel(ch);
        let maxima = pooled.channel(ch);
        for (i, (&v, &m)) in values.iter().zip(maxima).enumerate() {
            if v == m {
                peaks.push(Peak {
                    x: i % w,
                    y: i / w,
                    class_id: ch,
                    score: v,
                });
            }
        }
    }
    let order = |a: &Peak, b: &Peak| {
        b.score
            .total_cmp(&a.score)
            .then(a.class_id.cmp(&b.class_id))
            .then(a.y.cmp(&b.y))
            .then(a.x.cmp(&b.x))
    };
    if peaks.len() > k {
        peaks.select_nth_unstable_by(k - 1, order);
        peaks.truncate(k);
    }
    peaks.sort_unstable_by(order);
    debug_assert!(peaks.iter().all(|p| p.y < h));
    Ok(peaks)
}

/// Boxes decoded from peaks, plus how many peaks had a non-positive size.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Decoded {
    pub boxes: Vec<BBox>,
    pub dropped: usize,
}

/// Reads size and offset at every peak and scales the box back to pixels.
pub fn decode_boxes(peaks: &[Peak], wh: &Tensor, offset: &Tensor, stride: usize) -> Result<Decoded> {
    let (wc, h, w) = wh.dims3()?;
    if wc != 2 || offset.shape() != wh.shape() {
        return Err(Error::shape(
            "decode_boxes",
            format!("wh {:?} and offset {:?} must both be [2,h,w]", wh.shape(), offset.shape()),
        ));
    }
    let r = stride as f64;
    let mut out = Decoded::default();
    for p in peaks {
        if p.x >= w || p.y >= h {
            return Err(Error::invalid(
                "decode_boxes",
                format!("peak ({}, {}) outside {w}x{h} maps", p.x, p.y),
            ));
        }
        let bw = wh.get(&[0, p.y, p.x]);
        let bh = wh.get(&[1, p.y, p.x]);
        if !(bw > 0.0 && bh > 0.0) {
            out.dropped += 1;
            continue;
        }
        let cx = p.x as f64 + offset.get(&[0, p.y, p.x]);
        let cy = p.y as f64 + offset.get(&[1, p.y, p.x]);
        out.boxes.push(BBox {
            x1: (cx - bw / 2.0) * r,
            y1: (cy - bh / 2.0) * r,
            x2: (cx + bw / 2.0) * r,
            y2: (cy + bh / 2.0) * r,
            class_id: p.class_id,
            score: p.score,
        });
    }
    Ok(out)
}
